"""Streaming neuron moments and per-connection correlation coefficients.

For a prunable layer, the output neurons are its post-ReLU activations and
the fan-in neurons are the values it actually receives (after pooling, and
with dropout off). Everything is accumulated in float64 as raw sums, so
accumulators over disjoint shards merge by addition.

Pair sums are stored per output position: arrays are ``(M, U, K)`` with M
output positions, U output channels per position and K fan-in taps. For fc
layers M = 1; for local layers the ``(M, U)`` pairs are the layer's units;
for conv layers the M positions share one kernel and their correlation
magnitudes are summed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .layers import Network, forward, layer_input, layer_output_activation, patches


class StatsError(ValueError):
    pass


def _batches(data, batch_size):
    if isinstance(data, np.ndarray):
        for i in range(0, len(data), batch_size):
            yield data[i : i + batch_size]
    else:
        yield from data


@dataclass(eq=False)
class MomentAccumulator:
    layer_name: str
    kind: str
    positions: np.ndarray  # output positions covered (indices into M)
    n: int
    a_sum: np.ndarray  # (P, U)
    a_sq: np.ndarray
    a_min: np.ndarray
    a_max: np.ndarray
    b_sum: np.ndarray  # (P, K)
    b_sq: np.ndarray
    b_min: np.ndarray
    b_max: np.ndarray
    ab: np.ndarray  # (P, U, K)

    @classmethod
    def empty(cls, layer_name, kind, positions, units, fan_in):
        p = len(positions)
        return cls(
            layer_name, kind, np.asarray(positions), 0,
            np.zeros((p, units)), np.zeros((p, units)),
            np.full((p, units), np.inf), np.full((p, units), -np.inf),
            np.zeros((p, fan_in)), np.zeros((p, fan_in)),
            np.full((p, fan_in), np.inf), np.full((p, fan_in), -np.inf),
            np.zeros((p, units, fan_in)),
        )

    def update(self, a, b):
        """Fold one batch: ``a`` is ``(n, P, U)``, ``b`` is ``(n, P, K)``."""
        self.n += a.shape[0]
        self.a_sum += a.sum(axis=0)
        self.a_sq += (a * a).sum(axis=0)
        np.minimum(self.a_min, a.min(axis=0), out=self.a_min)
        np.maximum(self.a_max, a.max(axis=0), out=self.a_max)
        self.b_sum += b.sum(axis=0)
        self.b_sq += (b * b).sum(axis=0)
        np.minimum(self.b_min, b.min(axis=0), out=self.b_min)
        np.maximum(self.b_max, b.max(axis=0), out=self.b_max)
        self.ab += np.matmul(a.transpose(1, 2, 0), b.transpose(1, 0, 2))

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if other.layer_name != self.layer_name or not np.array_equal(other.positions, self.positions):
            raise StatsError("can only merge accumulators of the same layer and positions")
        return MomentAccumulator(
            self.layer_name, self.kind, self.positions, self.n + other.n,
            self.a_sum + other.a_sum, self.a_sq + other.a_sq,
            np.minimum(self.a_min, other.a_min), np.maximum(self.a_max, other.a_max),
            self.b_sum + other.b_sum, self.b_sq + other.b_sq,
            np.minimum(self.b_min, other.b_min), np.maximum(self.b_max, other.b_max),
            self.ab + other.ab,
        )

    def _moments(self, s, sq, lo, hi):
        mean = s / self.n
        var = np.maximum(sq / self.n - mean * mean, 0.0)
        degenerate = lo == hi
        return mean, np.where(degenerate, 0.0, np.sqrt(var)), degenerate

    def output_moments(self):
        """``(mean, std, degenerate)`` of the output neurons, each ``(P, U)``."""
        return self._moments(self.a_sum, self.a_sq, self.a_min, self.a_max)

    def input_moments(self):
        return self._moments(self.b_sum, self.b_sq, self.b_min, self.b_max)

    def correlations(self):
        """Per-position coefficients ``(P, U, K)`` and their degenerate flags."""
        if self.n < 2:
            raise StatsError("need at least 2 samples for correlations")
        mu_a, sd_a, deg_a = self.output_moments()
        mu_b, sd_b, deg_b = self.input_moments()
        cov = self.ab / self.n - mu_a[:, :, None] * mu_b[:, None, :]
        degenerate = deg_a[:, :, None] | deg_b[:, None, :]
        denom = np.where(degenerate, 1.0, sd_a[:, :, None] * sd_b[:, None, :])
        r = np.where(degenerate, 0.0, cov / denom)
        return np.clip(r, -1.0, 1.0), degenerate


@dataclass(eq=False)
class CorrelationTable:
    """Selection scores of one layer as a ``(units, K)`` matrix.

    fc/local: signed coefficients in [-1, 1]. conv: sums of absolute
    coefficients over the M shared positions, in [0, M]; the degenerate flag
    is set only when every position's term was degenerate.
    """

    layer_name: str
    kind: str
    r: np.ndarray
    degenerate: np.ndarray
    positions: int = 1

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "i", "k", "r", "degenerate"])
            for i in range(self.r.shape[0]):
                for k in range(self.r.shape[1]):
                    writer.writerow([self.layer_name, i, k, repr(float(self.r[i, k])), int(self.degenerate[i, k])])


def _layer_views(net, res, name):
    """``(a, b)`` arrays shaped ``(n, M, U)`` and ``(n, M, K)`` for one layer."""
    spec = net.spec
    layer = spec.layer(name)
    x = layer_input(res, spec, name)
    a = layer_output_activation(res, spec, name)
    n = x.shape[0]
    if layer.kind == "fc":
        return a.reshape(n, 1, -1), x.reshape(n, 1, -1)
    cols, _ = patches(x, layer)
    return a.reshape(n, cols.shape[1], -1), cols


def collect(net: Network, data, layers, batch_size: int = 256, positions=None) -> dict:
    """Accumulate moments for each named layer over ``data`` in eval mode.

    ``data`` is an ``(n, h, w, c)`` array or an iterable of such batches.
    ``positions`` restricts conv/local layers to a subset of output positions
    so that large conv layers can be processed in chunks.
    """
    spec = net.spec
    if isinstance(layers, str):
        layers = [layers]
    accs = {}
    for name in layers:
        layer = spec.layer(name)
        conn = spec.connectivity(name)  # raises NotPrunableError for pool/relu/...
        m_total = 1 if layer.kind == "fc" else spec.shapes[name][0] * spec.shapes[name][1]
        pos = np.arange(m_total) if positions is None or layer.kind == "fc" else np.asarray(positions)
        accs[name] = MomentAccumulator.empty(name, layer.kind, pos, layer.out_channels, conn.fan_in)
    for batch in _batches(data, batch_size):
        res = forward(net, batch, mode="eval")
        for name, acc in accs.items():
            a, b = _layer_views(net, res, name)
            if len(acc.positions) != a.shape[1]:
                a, b = a[:, acc.positions], b[:, acc.positions]
            acc.update(a, b)
    for acc in accs.values():
        if acc.n < 2:
            raise StatsError(f"layer {acc.layer_name!r}: need at least 2 samples, got {acc.n}")
    return accs


def correlations_fc_local(acc: MomentAccumulator) -> CorrelationTable:
    """Pearson coefficient of every (output unit, fan-in) pair; degenerate pairs score 0."""
    if acc.kind not in ("fc", "local"):
        raise StatsError(f"layer {acc.layer_name!r} is {acc.kind}, not fc/local")
    r, deg = acc.correlations()
    k = r.shape[-1]
    return CorrelationTable(acc.layer_name, acc.kind, r.reshape(-1, k), deg.reshape(-1, k), 1)


def correlations_conv(acc: MomentAccumulator) -> CorrelationTable:
    """Sum over shared positions of absolute coefficients, one score per kernel weight."""
    if acc.kind != "conv":
        raise StatsError(f"layer {acc.layer_name!r} is {acc.kind}, not conv")
    r, deg = acc.correlations()
    return CorrelationTable(acc.layer_name, "conv", np.abs(r).sum(axis=0), deg.all(axis=0), r.shape[0])


def correlation_table(net: Network, data, name: str, batch_size: int = 256, max_pair_entries: int = 1 << 24):
    """Collect and reduce correlations of one layer.

    For conv layers whose per-position pair table would exceed
    ``max_pair_entries`` floats, positions are processed in chunks (one pass
    over ``data`` per chunk), folding absolute coefficients as they finish.
    ``data`` must be re-iterable when chunking, so pass an array.
    """
    spec = net.spec
    layer = spec.layer(name)
    if layer.kind != "conv":
        (acc,) = collect(net, data, [name], batch_size).values()
        return correlations_fc_local(acc)
    conn = spec.connectivity(name)
    per_position = conn.units * conn.fan_in
    chunk = max(1, max_pair_entries // per_position)
    total = np.zeros((conn.units, conn.fan_in))
    all_deg = np.ones((conn.units, conn.fan_in), dtype=bool)
    for start in range(0, conn.shared_positions, chunk):
        pos = np.arange(start, min(start + chunk, conn.shared_positions))
        (acc,) = collect(net, data, [name], batch_size, positions=pos).values()
        part = correlations_conv(acc)
        total += part.r
        all_deg &= part.degenerate
    return CorrelationTable(name, "conv", total, all_deg, conn.shared_positions)


# --- pairwise statistics among fan-in neurons --------------------------------


@dataclass(eq=False)
class InputPairStats:
    """Correlations among the fan-in neurons of each output position.

    ``corr`` is ``(M, K, K)``; ``degenerate`` flags pairs with a constant
    member. For fc layers M = 1.
    """

    layer_name: str
    kind: str
    corr: np.ndarray
    degenerate: np.ndarray


def collect_input_pairs(net: Network, data, name: str, batch_size: int = 256) -> InputPairStats:
    spec = net.spec
    layer = spec.layer(name)
    conn = spec.connectivity(name)
    n = 0
    s = sq = cross = lo = hi = None
    for batch in _batches(data, batch_size):
        res = forward(net, batch, mode="eval")
        _, b = _layer_views(net, res, name)  # (n, M, K)
        if s is None:
            m = b.shape[1]
            s = np.zeros((m, conn.fan_in))
            sq = np.zeros((m, conn.fan_in))
            cross = np.zeros((m, conn.fan_in, conn.fan_in))
            lo = np.full((m, conn.fan_in), np.inf)
            hi = np.full((m, conn.fan_in), -np.inf)
        n += b.shape[0]
        s += b.sum(axis=0)
        sq += (b * b).sum(axis=0)
        bt = b.transpose(1, 0, 2)
        cross += np.matmul(bt.transpose(0, 2, 1), bt)
        np.minimum(lo, b.min(axis=0), out=lo)
        np.maximum(hi, b.max(axis=0), out=hi)
    if n < 2:
        raise StatsError(f"layer {name!r}: need at least 2 samples, got {n}")
    mean = s / n
    deg = lo == hi
    sd = np.where(deg, 0.0, np.sqrt(np.maximum(sq / n - mean * mean, 0.0)))
    cov = cross / n - mean[:, :, None] * mean[:, None, :]
    pair_deg = deg[:, :, None] | deg[:, None, :]
    denom = np.where(pair_deg, 1.0, sd[:, :, None] * sd[:, None, :])
    corr = np.clip(np.where(pair_deg, 0.0, cov / denom), -1.0, 1.0)
    return InputPairStats(name, layer.kind, corr, pair_deg)
