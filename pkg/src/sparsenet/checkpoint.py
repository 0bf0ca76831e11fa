"""Binary checkpoint of one model N_m plus the masks in force.

Layout, all integers little-endian::

    b"SPCN" | u16 version | 32-byte spec digest | u32 stage | u32 layer count
    per layer:
        u16 name length | utf-8 name
        u64 weight count | weights as float32
        u64 bias count   | biases as float32
        u8 has_mask      | [f64 target sparsity | mask record]
    8-byte blake2b checksum of everything above

Mask records use :meth:`DroppingMask.to_bytes`, so a dropped weight costs one
bit next to the four bytes of its float.
"""
from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .layers import Network, NetworkSpec
from .masks import DroppingMask, MaskError

MAGIC = b"SPCN"
VERSION = 1
_CHECKSUM_BYTES = 8


class CheckpointError(ValueError):
    pass


class DigestMismatch(CheckpointError):
    pass


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=_CHECKSUM_BYTES).digest()


def encode_checkpoint(net: Network, masks=None) -> bytes:
    spec = net.spec
    masks = masks or {}
    if not isinstance(masks, dict):
        masks = {m.layer_name: m for m in masks}
    names = spec.prunable_layers
    unknown = set(masks) - set(names)
    if unknown:
        raise CheckpointError(f"masks for unknown layers: {sorted(unknown)}")
    parts = [MAGIC, struct.pack("<H", VERSION), spec.digest(), struct.pack("<II", net.stage, len(names))]
    for name in names:
        raw = name.encode("utf-8")
        W = np.ascontiguousarray(net.params[name]["W"], dtype="<f4").ravel()
        b = np.ascontiguousarray(net.params[name]["b"], dtype="<f4").ravel()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<Q", W.size), W.tobytes(),
                  struct.pack("<Q", b.size), b.tobytes()]
        mask = masks.get(name)
        if mask is None:
            parts.append(b"\x00")
        else:
            parts += [b"\x01", struct.pack("<d", mask.target_sparsity), mask.to_bytes()]
    body = b"".join(parts)
    return body + _checksum(body)


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    _atomic_write(path, text.encode("utf-8"))


def save_checkpoint(net: Network, masks, path):
    _atomic_write(path, encode_checkpoint(net, masks))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, spec: NetworkSpec):
    """Returns ``(network, masks)``; masks is a dict keyed by layer name."""
    if len(data) < len(MAGIC) + _CHECKSUM_BYTES or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, tail = data[:-_CHECKSUM_BYTES], data[-_CHECKSUM_BYTES:]
    if _checksum(body) != tail:
        raise CheckpointError("checksum mismatch: file is corrupt or truncated")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = r.take(32)
    if digest != spec.digest():
        raise DigestMismatch("checkpoint was written for a different network spec")
    stage, count = r.unpack("<II")
    params, masks = {}, {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (wn,) = r.unpack("<Q")
        W = np.frombuffer(r.take(4 * wn), dtype="<f4").astype(np.float64)
        (bn,) = r.unpack("<Q")
        b = np.frombuffer(r.take(4 * bn), dtype="<f4").astype(np.float64)
        try:
            W = W.reshape(spec.weight_shape(name))
            b = b.reshape(spec.bias_shape(name))
        except (ValueError, KeyError) as exc:
            raise CheckpointError(f"layer {name!r}: stored arrays do not fit the network spec") from exc
        params[name] = {"W": W, "b": b}
        (has_mask,) = r.unpack("<B")
        if has_mask:
            (target,) = r.unpack("<d")
            try:
                mask, end = DroppingMask.from_bytes(body, r.pos, spec.weight_shape(name), target)
            except MaskError as exc:
                raise CheckpointError(str(exc)) from exc
            r.pos = end
            masks[name] = mask
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after the last layer")
    if set(params) != set(spec.prunable_layers):
        raise CheckpointError("checkpoint layers do not match the network spec")
    return Network(spec, params, stage), masks


def load_checkpoint(path, spec: NetworkSpec):
    return decode_checkpoint(Path(path).read_bytes(), spec)
