"""Dropping masks and the train-time rules that make a dense net act sparse.

A mask holds one bit per weight scalar (1 = reserved, 0 = dropped) in the
row-major order of the layer's weight tensor. For conv layers one bit covers
one shared kernel weight, i.e. all of its connections at once.

Training order under masks is: mask -> forward -> backward -> update -> clip.
:func:`apply_masks` and :func:`clip_after_update` have the same effect; the
second exists so the loop reads in that order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .layers import Network, NetworkSpec, NotPrunableError, _pool_forward, softmax


class MaskError(ValueError):
    pass


@dataclass(eq=False)
class DroppingMask:
    layer_name: str
    bits: np.ndarray  # bool, same shape as the layer's weight tensor
    target_sparsity: float = 1.0

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if not 0.0 < self.target_sparsity <= 1.0:
            raise MaskError(f"target sparsity must be in (0, 1], got {self.target_sparsity}")

    @classmethod
    def ones(cls, spec: NetworkSpec, name: str) -> "DroppingMask":
        return cls(name, np.ones(spec.weight_shape(name), dtype=bool), 1.0)

    @classmethod
    def from_matrix(cls, spec: NetworkSpec, name: str, keep, target_sparsity: float = 1.0) -> "DroppingMask":
        """Build from a ``(units, K)`` boolean matrix."""
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != spec.matrix_shape(name):
            raise MaskError(f"{name}: matrix {keep.shape} != {spec.matrix_shape(name)}")
        return cls(name, keep.reshape(spec.weight_shape(name)), target_sparsity)

    @property
    def total(self) -> int:
        return int(self.bits.size)

    @property
    def kept(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def realized_sparsity(self) -> float:
        return self.kept / self.total

    def matrix(self, spec: NetworkSpec) -> np.ndarray:
        return self.bits.reshape(spec.matrix_shape(self.layer_name))

    def unit_counts(self, spec: NetworkSpec) -> np.ndarray:
        return self.matrix(spec).sum(axis=1)

    def __eq__(self, other):
        if not isinstance(other, DroppingMask):
            return NotImplemented
        return self.layer_name == other.layer_name and np.array_equal(self.bits, other.bits)

    # binary layout: u16 name length, utf-8 name, u64 bit count, ceil(n/8) bytes LSB-first

    def to_bytes(self) -> bytes:
        name = self.layer_name.encode("utf-8")
        payload = np.packbits(self.bits.ravel(), bitorder="little").tobytes()
        return struct.pack("<H", len(name)) + name + struct.pack("<Q", self.bits.size) + payload

    @classmethod
    def from_bytes(cls, buf, offset: int = 0, shape=None, target_sparsity: float = 1.0):
        """Parse one mask starting at ``offset``; returns ``(mask, next_offset)``."""
        buf = memoryview(buf)
        try:
            (name_len,) = struct.unpack_from("<H", buf, offset)
            offset += 2
            name = bytes(buf[offset : offset + name_len]).decode("utf-8")
            offset += name_len
            (count,) = struct.unpack_from("<Q", buf, offset)
            offset += 8
        except struct.error as exc:
            raise MaskError("truncated mask record") from exc
        nbytes = (count + 7) // 8
        if offset + nbytes > len(buf):
            raise MaskError("truncated mask record")
        raw = np.frombuffer(buf[offset : offset + nbytes], dtype=np.uint8)
        bits = np.unpackbits(raw, count=count, bitorder="little").astype(bool)
        if shape is not None:
            if int(np.prod(shape)) != count:
                raise MaskError(f"{name}: {count} bits cannot fill shape {tuple(shape)}")
            bits = bits.reshape(shape)
        return cls(name, bits, target_sparsity), offset + nbytes


def _as_mask_list(masks):
    if masks is None:
        return []
    if isinstance(masks, DroppingMask):
        return [masks]
    if isinstance(masks, dict):
        return list(masks.values())
    return list(masks)


def validate_mask(spec: NetworkSpec, mask: DroppingMask):
    try:
        layer = spec.layer(mask.layer_name)
    except KeyError:
        raise MaskError(f"mask names unknown layer {mask.layer_name!r}") from None
    if not layer.prunable:
        raise NotPrunableError(f"layer {mask.layer_name!r} ({layer.kind}) is not prunable")
    expected = spec.weight_count(mask.layer_name)
    if mask.bits.size != expected:
        raise MaskError(f"mask for {mask.layer_name!r} has {mask.bits.size} bits, layer has {expected} weights")
    if mask.bits.shape != spec.weight_shape(mask.layer_name):
        mask.bits = mask.bits.reshape(spec.weight_shape(mask.layer_name))


def apply_masks(net: Network, masks) -> Network:
    """Zero every weight whose mask bit is 0, in place. Unmasked layers are untouched."""
    masks = _as_mask_list(masks)
    for mask in masks:
        validate_mask(net.spec, mask)
    for mask in masks:
        net.params[mask.layer_name]["W"][~mask.bits] = 0.0
    return net


def clip_after_update(net: Network, masks) -> Network:
    """Post-optimizer-step hook: dropped weights are clipped back to exactly 0."""
    return apply_masks(net, masks)


def count_violations(net: Network, masks) -> int:
    """Number of dropped positions whose weight is not exactly 0.0."""
    return sum(
        int(np.count_nonzero(net.params[m.layer_name]["W"][~m.bits])) for m in _as_mask_list(masks)
    )


# --- structurally pruned representation ----------------------------------


class SparseLayer:
    """Explicit surviving connections of one conv/local/fc layer.

    ``units`` is a list with one entry per output unit (per output map for
    conv): ``(taps, weights)`` where ``taps`` are canonical fan-in indices.
    The forward pass gathers inputs tap by tap and never consults a mask.
    """

    def __init__(self, spec: NetworkSpec, name: str, W, b, keep):
        self.name = name
        self.layer = spec.layer(name)
        self.kind = self.layer.kind
        self.in_shape = spec.in_shapes[name]
        self.out_shape = spec.shapes[name]
        self.bias = np.array(b, dtype=np.float64)
        units, k = spec.matrix_shape(name)
        wm = np.asarray(W, dtype=np.float64).reshape(units, k)
        keep = np.asarray(keep, dtype=bool).reshape(units, k)
        self.units = [(np.flatnonzero(keep[u]), wm[u, keep[u]].copy()) for u in range(units)]

    @property
    def nnz(self) -> int:
        return sum(len(t) for t, _ in self.units)

    def _tap_coords(self, taps):
        kh, kw = self.layer.kernel
        c, rem = np.divmod(taps, kh * kw)
        ky, kx = np.divmod(rem, kw)
        return c, ky, kx

    def forward(self, x):
        n = x.shape[0]
        if self.kind == "fc":
            flat = x.reshape(n, -1)
            out = np.empty((n, len(self.units)))
            for u, (taps, w) in enumerate(self.units):
                out[:, u] = flat[:, taps] @ w + self.bias[u]
            return out
        s, p = self.layer.stride, self.layer.padding
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        oh, ow, out_c = self.out_shape
        out = np.zeros((n, oh, ow, out_c))
        if self.kind == "conv":
            for o, (taps, w) in enumerate(self.units):
                c, ky, kx = self._tap_coords(taps)
                for j in range(len(taps)):
                    out[:, :, :, o] += w[j] * xp[:, ky[j] : ky[j] + s * oh : s, kx[j] : kx[j] + s * ow : s, c[j]]
                out[:, :, :, o] += self.bias[o]
            return out
        # local: unit index runs over (oy, ox, o)
        for u, (taps, w) in enumerate(self.units):
            oy, rem = divmod(u, ow * out_c)
            ox, o = divmod(rem, out_c)
            c, ky, kx = self._tap_coords(taps)
            vals = xp[:, oy * s + ky, ox * s + kx, c]
            out[:, oy, ox, o] = vals @ w + self.bias[oy, ox, o]
        return out


class SparseNetwork:
    """Eval-mode network whose conv/local/fc layers are :class:`SparseLayer` objects."""

    def __init__(self, spec: NetworkSpec, layers: dict):
        self.spec = spec
        self.layers = layers

    def forward(self, x):
        """Returns ``(activations, logits)`` like the dense eval pass."""
        x = np.asarray(x, dtype=np.float64)
        acts, logits = {}, None
        for layer in self.spec.layers:
            if layer.prunable:
                x = self.layers[layer.name].forward(x)
            elif layer.kind == "pool":
                x, _ = _pool_forward(x, layer)
            elif layer.kind == "relu":
                x = np.maximum(x, 0.0)
            elif layer.kind == "softmax":
                logits = x
                x = softmax(x)
            acts[layer.name] = x
        if logits is None:
            logits = x.reshape(x.shape[0], -1)
        return acts, logits

    def nnz(self) -> dict:
        return {name: layer.nnz for name, layer in self.layers.items()}


def densify_equivalent(net: Network, masks) -> SparseNetwork:
    """Structurally pruned description of ``net`` under ``masks``.

    Layers without a mask keep every connection.
    """
    by_name = {}
    for mask in _as_mask_list(masks):
        validate_mask(net.spec, mask)
        by_name[mask.layer_name] = mask.bits
    layers = {}
    for name in net.spec.prunable_layers:
        keep = by_name.get(name, np.ones(net.spec.weight_shape(name), dtype=bool))
        p = net.params[name]
        layers[name] = SparseLayer(net.spec, name, p["W"], p["b"], keep)
    return SparseNetwork(net.spec, layers)
