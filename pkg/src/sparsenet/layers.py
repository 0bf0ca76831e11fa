"""Layer zoo, network specification and exact forward/backward passes.

Arrays flowing between layers are batch-first. Spatial activations use
``(n, height, width, channels)``; fully-connected activations use
``(n, features)``. Weight layouts:

* conv  ``(out_c, in_c, kh, kw)`` shared across every output position
* local ``(out_h, out_w, out_c, in_c, kh, kw)``, one kernel per position
* fc    ``(out, in)`` over the row-major flattened ``(h, w, c)`` input

Every prunable layer views its weights as a ``(units, K)`` matrix whose rows
are output units (maps for conv) and whose columns are fan-in taps ordered
``(in_c, ky, kx)``; masks and correlation tables share that view.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("conv", "local", "pool", "fc", "relu", "dropout", "softmax")
PRUNABLE_KINDS = ("conv", "local", "fc")


class SpecError(ValueError):
    """Invalid network specification."""


class NotPrunableError(SpecError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    out_channels: int | None = None
    in_channels: int | None = None
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        kernel = self.kernel
        if isinstance(kernel, int):
            kernel = (kernel, kernel)
        object.__setattr__(self, "kernel", tuple(int(k) for k in kernel))
        if len(self.kernel) != 2 or min(self.kernel) < 1:
            raise SpecError(f"layer {self.name!r}: kernel must be two positive ints")
        if self.stride < 1:
            raise SpecError(f"layer {self.name!r}: stride must be positive")
        if self.padding < 0:
            raise SpecError(f"layer {self.name!r}: padding must be non-negative")
        if self.kind in PRUNABLE_KINDS and (self.out_channels is None or self.out_channels < 1):
            raise SpecError(f"layer {self.name!r}: out_channels must be a positive int")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise SpecError(f"layer {self.name!r}: dropout_rate must be in [0, 1)")

    @property
    def prunable(self) -> bool:
        return self.kind in PRUNABLE_KINDS


class Connectivity(NamedTuple):
    fan_in: int  # K
    shared_positions: int  # M
    units: int  # N


def _out_extent(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


@dataclass
class NetworkSpec:
    """Ordered layer list with input shape ``(h, w, c)`` and class count.

    Shapes are chained and validated on construction; a bad chain never
    reaches ``forward``.
    """

    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    classes: int
    shapes: dict = field(init=False, repr=False, compare=False)
    in_shapes: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = list(self.layers)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input shape must be (h, w, c) positive, got {self.input_shape}")
        if self.classes < 1:
            raise SpecError("class count must be positive")
        names = [layer.name for layer in self.layers]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SpecError(f"duplicate layer names: {dupes}")
        shape = self.input_shape
        self.shapes, self.in_shapes = {}, {}
        for idx, layer in enumerate(self.layers):
            self.in_shapes[layer.name] = shape
            shape = self._chain(layer, shape, idx)
            self.shapes[layer.name] = shape

    def _chain(self, layer, shape, idx):
        kind = layer.kind
        if layer.in_channels is not None:
            have = int(np.prod(shape)) if kind == "fc" else shape[-1]
            if have != layer.in_channels:
                raise SpecError(
                    f"layer {layer.name!r}: declared in_channels {layer.in_channels}, chain gives {have}"
                )
        if kind in ("conv", "local", "pool"):
            if len(shape) != 3:
                raise SpecError(f"layer {layer.name!r}: {kind} needs a spatial input, got {shape}")
            h, w, c = shape
            kh, kw = layer.kernel
            oh = _out_extent(h, kh, layer.stride, layer.padding)
            ow = _out_extent(w, kw, layer.stride, layer.padding)
            if oh < 1 or ow < 1:
                raise SpecError(
                    f"layer {layer.name!r}: output size {oh}x{ow} from input {h}x{w} is empty"
                )
            if kind == "pool":
                if layer.padding >= min(kh, kw):
                    raise SpecError(f"layer {layer.name!r}: pool padding must be < kernel")
                return (oh, ow, c)
            return (oh, ow, layer.out_channels)
        if kind == "fc":
            return (layer.out_channels,)
        if kind == "softmax":
            if idx != len(self.layers) - 1:
                raise SpecError(f"layer {layer.name!r}: softmax must be the last layer")
            if shape != (self.classes,):
                raise SpecError(
                    f"layer {layer.name!r}: softmax input {shape} does not match {self.classes} classes"
                )
        return shape

    # lookups -------------------------------------------------------------

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(f"no layer named {name!r}")

    def index(self, name: str) -> int:
        return [layer.name for layer in self.layers].index(name)

    @property
    def prunable_layers(self) -> list[str]:
        return [layer.name for layer in self.layers if layer.prunable]

    @property
    def has_head(self) -> bool:
        return bool(self.layers) and self.layers[-1].kind == "softmax"

    def weight_shape(self, name: str) -> tuple:
        layer = self.layer(name)
        in_shape, out_shape = self.in_shapes[name], self.shapes[name]
        if layer.kind == "conv":
            return (layer.out_channels, in_shape[-1], *layer.kernel)
        if layer.kind == "local":
            return (out_shape[0], out_shape[1], layer.out_channels, in_shape[-1], *layer.kernel)
        if layer.kind == "fc":
            return (layer.out_channels, int(np.prod(in_shape)))
        raise NotPrunableError(f"layer {name!r} ({layer.kind}) is not prunable")

    def bias_shape(self, name: str) -> tuple:
        layer = self.layer(name)
        if layer.kind == "local":
            oh, ow, _ = self.shapes[name]
            return (oh, ow, layer.out_channels)
        if layer.kind in ("conv", "fc"):
            return (layer.out_channels,)
        raise NotPrunableError(f"layer {name!r} ({layer.kind}) is not prunable")

    def matrix_shape(self, name: str) -> tuple[int, int]:
        """``(units, K)`` view of the weight tensor."""
        conn = self.connectivity(name)
        return (conn.units, conn.fan_in)

    def connectivity(self, name: str) -> Connectivity:
        layer = self.layer(name)
        in_shape, out_shape = self.in_shapes[name], self.shapes[name]
        if layer.kind == "fc":
            return Connectivity(int(np.prod(in_shape)), 1, layer.out_channels)
        if layer.kind in ("conv", "local"):
            kh, kw = layer.kernel
            k = kh * kw * in_shape[-1]
            positions = out_shape[0] * out_shape[1]
            if layer.kind == "local":
                return Connectivity(k, 1, positions * layer.out_channels)
            return Connectivity(k, positions, layer.out_channels)
        raise NotPrunableError(f"layer {name!r} ({layer.kind}) is not prunable")

    def weight_count(self, name: str) -> int:
        return int(np.prod(self.weight_shape(name)))

    def param_count(self, name: str) -> int:
        return self.weight_count(name) + int(np.prod(self.bias_shape(name)))

    def total_weights(self) -> int:
        return sum(self.weight_count(n) for n in self.prunable_layers)

    # serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            d = asdict(layer)
            d["kernel"] = list(layer.kernel)
            layers.append(d)
        return {"input_shape": list(self.input_shape), "classes": self.classes, "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = [LayerSpec(**{**layer, "kernel": tuple(layer["kernel"])}) for layer in d["layers"]]
        return cls(tuple(d["input_shape"]), layers, d["classes"])

    def digest(self) -> bytes:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).digest()


def connectivity(spec: NetworkSpec, name: str) -> Connectivity:
    return spec.connectivity(name)


class Network:
    """Parameters of one instantiated :class:`NetworkSpec`.

    ``params[name]`` holds ``{"W": ..., "b": ...}`` float64 arrays for every
    conv/local/fc layer. ``stage`` is the index m of the model N_m.
    """

    def __init__(self, spec: NetworkSpec, params: dict | None = None, stage: int = 0):
        self.spec = spec
        self.stage = stage
        if params is None:
            params = {
                name: {
                    "W": np.zeros(spec.weight_shape(name)),
                    "b": np.zeros(spec.bias_shape(name)),
                }
                for name in spec.prunable_layers
            }
        for name in spec.prunable_layers:
            if params[name]["W"].shape != spec.weight_shape(name):
                raise SpecError(
                    f"layer {name!r}: weight shape {params[name]['W'].shape} != {spec.weight_shape(name)}"
                )
            if params[name]["b"].shape != spec.bias_shape(name):
                raise SpecError(f"layer {name!r}: bias shape mismatch")
        self.params = params

    @classmethod
    def initialize(cls, spec: NetworkSpec, rng: np.random.Generator, scale: float = 1.0) -> "Network":
        """Zero-mean uniform weights with bound ``scale * sqrt(6 / fan_in)``; zero biases."""
        params = {}
        for name in spec.prunable_layers:
            fan_in = spec.connectivity(name).fan_in
            bound = scale * np.sqrt(6.0 / fan_in)
            params[name] = {
                "W": rng.uniform(-bound, bound, size=spec.weight_shape(name)),
                "b": np.zeros(spec.bias_shape(name)),
            }
        return cls(spec, params)

    def copy(self) -> "Network":
        return Network(self.spec, copy.deepcopy(self.params), self.stage)

    def weight_matrix(self, name: str) -> np.ndarray:
        """Writable ``(units, K)`` view of a layer's weights."""
        return self.params[name]["W"].reshape(self.spec.matrix_shape(name))


# --- primitive kernels ---------------------------------------------------


def im2col(x, kernel, stride, padding):
    """Patches of NHWC ``x`` as ``(n, out_h * out_w, kh * kw * c)``, taps ordered (ky, kx, c).

    This kernel order is internal; :func:`tap_order` maps it to the
    canonical ``(c, ky, kx)`` order of the weight tensors.
    """
    kh, kw = kernel
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    n, oh, ow, c = win.shape[:4]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n, oh * ow, kh * kw * c)
    return cols, (oh, ow)


def col2im(dcols, x_shape, kernel, stride, padding, out_hw):
    kh, kw = kernel
    n, h, w, c = x_shape
    oh, ow = out_hw
    d = dcols.reshape(n, oh, ow, kh, kw, c)
    dx = np.zeros((n, h + 2 * padding, w + 2 * padding, c))
    for ky in range(kh):
        for kx in range(kw):
            dx[:, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride, :] += d[:, :, :, ky, kx, :]
    if padding:
        dx = dx[:, padding:-padding, padding:-padding, :]
    return dx


def tap_order(channels, kernel):
    """Index array ``perm`` with ``canonical_cols = cols[..., perm]``.

    Canonical fan-in order is ``(c, ky, kx)``, the row-major order of one
    kernel in the weight tensor.
    """
    kh, kw = kernel
    return np.arange(kh * kw * channels).reshape(kh, kw, channels).transpose(2, 0, 1).ravel()


def patches(x, layer: LayerSpec):
    """Fan-in neurons of every output position, ``(n, M, K)`` in canonical order."""
    cols, hw = im2col(x, layer.kernel, layer.stride, layer.padding)
    return cols[..., tap_order(x.shape[-1], layer.kernel)], hw


def _kernel_matrix(W):
    """conv ``(out, c, kh, kw)`` -> ``(out, K)`` in (ky, kx, c) order."""
    return W.transpose(0, 2, 3, 1).reshape(W.shape[0], -1)


def _local_matrices(W):
    """local ``(oh, ow, out, c, kh, kw)`` -> ``(M, out, K)`` in (ky, kx, c) order."""
    oh, ow, out = W.shape[:3]
    return W.transpose(0, 1, 2, 4, 5, 3).reshape(oh * ow, out, -1)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy loss and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    p = softmax(logits)
    loss = -np.mean(np.log(np.maximum(p[np.arange(n), labels], 1e-300)))
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


# --- forward / backward --------------------------------------------------


class ForwardResult(NamedTuple):
    activations: dict  # layer name -> output array
    logits: np.ndarray
    cache: dict | None
    inputs: np.ndarray


def _resolve_rng(rng_seed):
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def forward(net: Network, batch, mode: str = "eval", rng_seed=None, keep_cache: bool | None = None) -> ForwardResult:
    """Run ``batch`` (``(n, h, w, c)``) through every layer.

    Dropout is active only in ``train`` mode and uses inverted scaling, so the
    eval pass needs no rescale. Caches for :func:`backward` are kept in train
    mode, or in eval mode when ``keep_cache`` is set.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    spec = net.spec
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        raise ValueError(f"batch shape {x.shape[1:]} does not match input (h, w, c) = {spec.input_shape}")
    if keep_cache is None:
        keep_cache = mode == "train"
    rng = _resolve_rng(rng_seed) if mode == "train" else None
    acts, cache = {}, {} if keep_cache else None
    inputs = x
    logits = None
    n = x.shape[0]
    for layer in spec.layers:
        name, kind = layer.name, layer.kind
        if kind == "conv":
            W, b = net.params[name]["W"], net.params[name]["b"]
            cols, (oh, ow) = im2col(x, layer.kernel, layer.stride, layer.padding)
            y = (cols @ _kernel_matrix(W).T + b).reshape(n, oh, ow, -1)
            if keep_cache:
                cache[name] = (cols, x.shape, (oh, ow))
        elif kind == "local":
            W, b = net.params[name]["W"], net.params[name]["b"]
            cols, (oh, ow) = im2col(x, layer.kernel, layer.stride, layer.padding)
            wm = _local_matrices(W)  # (M, out_c, K)
            out = np.matmul(cols.transpose(1, 0, 2), wm.transpose(0, 2, 1))  # (M, n, out_c)
            y = out.transpose(1, 0, 2).reshape(n, oh, ow, -1) + b
            if keep_cache:
                cache[name] = (cols, x.shape, (oh, ow))
        elif kind == "fc":
            W, b = net.params[name]["W"], net.params[name]["b"]
            flat = x.reshape(n, -1)
            y = flat @ W.T + b
            if keep_cache:
                cache[name] = (flat, x.shape)
        elif kind == "pool":
            y, arg = _pool_forward(x, layer)
            if keep_cache:
                cache[name] = (arg, x.shape)
        elif kind == "relu":
            y = np.maximum(x, 0.0)
            if keep_cache:
                cache[name] = x > 0
        elif kind == "dropout":
            keep = None
            y = x
            if mode == "train" and layer.dropout_rate > 0:
                keep = (rng.random(x.shape) >= layer.dropout_rate) / (1.0 - layer.dropout_rate)
                y = x * keep
            if keep_cache:
                cache[name] = keep
        else:  # softmax
            logits = x
            y = softmax(x)
        acts[name] = y
        x = y
    if logits is None:
        logits = x.reshape(n, -1)
    return ForwardResult(acts, logits, cache, inputs)


def _pool_forward(x, layer):
    kh, kw = layer.kernel
    s, p = layer.stride, layer.padding
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), constant_values=-np.inf)
    n, h, w, c = x.shape
    oh, ow = (h - kh) // s + 1, (w - kw) // s + 1
    best = x[:, : s * oh : s, : s * ow : s]
    arg = np.zeros(best.shape, dtype=np.int16)
    for t in range(1, kh * kw):
        ky, kx = divmod(t, kw)
        tap = x[:, ky : ky + s * oh : s, kx : kx + s * ow : s]
        better = tap > best
        best = np.where(better, tap, best)
        arg[better] = t
    return best, arg


def _pool_backward(dy, arg, x_shape, layer):
    kh, kw = layer.kernel
    s, p = layer.stride, layer.padding
    n, h, w, c = x_shape
    oh, ow = dy.shape[1:3]
    dx = np.zeros((n, h + 2 * p, w + 2 * p, c))
    for t in range(kh * kw):
        ky, kx = divmod(t, kw)
        dx[:, ky : ky + s * oh : s, kx : kx + s * ow : s] += np.where(arg == t, dy, 0.0)
    if p:
        dx = dx[:, p:-p, p:-p]
    return dx


def _conv_input_grad(dout, W, x_shape, layer, out_hw):
    """Input gradient of a conv layer; stride 1 runs as a full convolution with the flipped kernel."""
    kh, kw = layer.kernel
    p = layer.padding
    n = dout.shape[0]
    oh, ow = out_hw
    if layer.stride == 1 and kh == kw and p <= kh - 1:
        dmap = dout.reshape(n, oh, ow, -1)
        cols, (h, w) = im2col(dmap, layer.kernel, 1, kh - 1 - p)
        flipped = W[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(W.shape[1], -1)
        return (cols @ flipped.T).reshape(n, h, w, -1)
    return col2im(dout @ _kernel_matrix(W), x_shape, layer.kernel, layer.stride, layer.padding, out_hw)


class MissingCacheError(RuntimeError):
    pass


def backward(net: Network, result: ForwardResult, labels, return_upstream: bool = False):
    """Gradients of the mean softmax cross-entropy loss.

    Returns ``(loss, grads)`` with ``grads[name] = {"W": ..., "b": ...}``. With
    ``return_upstream`` a third dict maps each prunable layer to the gradient
    w.r.t. its pre-activation output, shaped ``(n, M, units_per_position)``.
    """
    if result.cache is None:
        raise MissingCacheError("forward was run without caches; use mode='train' or keep_cache=True")
    spec = net.spec
    loss, dy = softmax_cross_entropy(result.logits, labels)
    layers = spec.layers[:-1] if spec.has_head else spec.layers
    grads, upstream = {}, {}
    for idx in range(len(layers) - 1, -1, -1):
        layer = layers[idx]
        name, kind = layer.name, layer.kind
        need_dx = idx > 0
        if name not in result.cache:
            raise MissingCacheError(f"no cache for layer {name!r}")
        c = result.cache[name]
        if kind == "relu":
            dy = dy * c
        elif kind == "dropout":
            if c is not None:
                dy = dy * c
        elif kind == "pool":
            arg, x_shape = c
            dy = _pool_backward(dy, arg, x_shape, layer)
        elif kind == "fc":
            flat, x_shape = c
            dy = dy.reshape(dy.shape[0], -1)
            W = net.params[name]["W"]
            grads[name] = {"W": dy.T @ flat, "b": dy.sum(axis=0)}
            if return_upstream:
                upstream[name] = dy[:, None, :]
            if need_dx:
                dy = (dy @ W).reshape(x_shape)
        elif kind == "conv":
            cols, x_shape, (oh, ow) = c
            W = net.params[name]["W"]
            n = dy.shape[0]
            dout = dy.reshape(n, oh * ow, -1)  # (n, M, out_c)
            dk = dout.reshape(-1, dout.shape[2]).T @ cols.reshape(-1, cols.shape[2])
            dW = dk.reshape(W.shape[0], W.shape[2], W.shape[3], W.shape[1]).transpose(0, 3, 1, 2)
            grads[name] = {"W": dW, "b": dout.sum(axis=(0, 1))}
            if return_upstream:
                upstream[name] = dout
            if need_dx:
                dy = _conv_input_grad(dout, W, x_shape, layer, (oh, ow))
        elif kind == "local":
            cols, x_shape, (oh, ow) = c
            W = net.params[name]["W"]
            n = dy.shape[0]
            dout = dy.reshape(n, oh * ow, -1).transpose(1, 0, 2)  # (M, n, out_c)
            dk = np.matmul(dout.transpose(0, 2, 1), cols.transpose(1, 0, 2))  # (M, out_c, K)
            kh, kw = layer.kernel
            dW = dk.reshape(oh, ow, W.shape[2], kh, kw, W.shape[3]).transpose(0, 1, 2, 5, 3, 4)
            grads[name] = {"W": dW, "b": dout.sum(axis=1).reshape(oh, ow, -1)}
            if return_upstream:
                upstream[name] = dout.transpose(1, 0, 2)
            if need_dx:
                dcols = np.matmul(dout, _local_matrices(W)).transpose(1, 0, 2)  # (n, M, K)
                dy = col2im(dcols, x_shape, layer.kernel, layer.stride, layer.padding, (oh, ow))
    if return_upstream:
        return loss, grads, upstream
    return loss, grads


def layer_input(result: ForwardResult, spec: NetworkSpec, name: str) -> np.ndarray:
    idx = spec.index(name)
    return result.inputs if idx == 0 else result.activations[spec.layers[idx - 1].name]


def layer_output_activation(result: ForwardResult, spec: NetworkSpec, name: str) -> np.ndarray:
    """Post-nonlinearity output of ``name``: the following ReLU's output if there is one."""
    idx = spec.index(name)
    if idx + 1 < len(spec.layers) and spec.layers[idx + 1].kind == "relu":
        return result.activations[spec.layers[idx + 1].name]
    return result.activations[name]


def predict(net: Network, X, batch_size: int = 512) -> np.ndarray:
    out = [forward(net, X[i : i + batch_size]).logits.argmax(axis=1) for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def evaluate(net: Network, X, y, batch_size: int = 512) -> tuple[float, float]:
    """Mean loss and accuracy in eval mode."""
    total_loss, correct = 0.0, 0
    for i in range(0, len(X), batch_size):
        res = forward(net, X[i : i + batch_size])
        loss, _ = softmax_cross_entropy(res.logits, y[i : i + batch_size])
        total_loss += loss * len(res.logits)
        correct += int((res.logits.argmax(axis=1) == y[i : i + batch_size]).sum())
    return total_loss / len(X), correct / len(X)
