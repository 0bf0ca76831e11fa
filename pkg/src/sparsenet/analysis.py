"""Measurements on sparsified networks: compression, correlation tracking,
in-neighbour complementarity and magnitude-rank histograms.

Every function here is a pure read of its inputs.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .layers import NetworkSpec
from .masks import DroppingMask
from .stats import CorrelationTable, InputPairStats


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class LayerCount:
    name: str
    total: int
    kept: int


@dataclass(frozen=True)
class CompressionSummary:
    layers: tuple

    @property
    def total(self) -> int:
        return sum(c.total for c in self.layers)

    @property
    def kept(self) -> int:
        return sum(c.kept for c in self.layers)

    @property
    def ratio(self) -> float:
        return self.kept / self.total

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "total", "kept", "ratio"])
            for c in self.layers:
                writer.writerow([c.name, c.total, c.kept, repr(c.kept / c.total)])
            writer.writerow(["all", self.total, self.kept, repr(self.ratio)])


def compression_ratio(spec: NetworkSpec, plan) -> CompressionSummary:
    """Planned weight count relative to the dense model, biases excluded.

    ``plan`` is a :class:`~sparsenet.pipeline.SparsityPlan`, a mapping
    ``layer -> S`` or an iterable of ``(layer, S)`` pairs.
    """
    if hasattr(plan, "stages"):
        pairs = [(st.layer, st.sparsity) for st in plan.stages]
    elif isinstance(plan, dict):
        pairs = list(plan.items())
    else:
        pairs = list(plan)
    planned = {}
    for name, s in pairs:
        spec.connectivity(name)  # unknown or non-prunable layers raise here
        planned[name] = s
    counts = []
    for name in spec.prunable_layers:
        total = spec.weight_count(name)
        kept = round(planned[name] * total) if name in planned else total
        counts.append(LayerCount(name, total, kept))
    return CompressionSummary(tuple(counts))


def realized_compression(spec: NetworkSpec, masks) -> CompressionSummary:
    """Like :func:`compression_ratio` but counting the bits actually set in ``masks``."""
    by_name = {m.layer_name: m for m in (masks.values() if isinstance(masks, dict) else masks)}
    return CompressionSummary(tuple(
        LayerCount(name, spec.weight_count(name), by_name[name].kept if name in by_name else spec.weight_count(name))
        for name in spec.prunable_layers
    ))


def selected_corr_mean(mask: DroppingMask, table: CorrelationTable, spec: NetworkSpec) -> float:
    """Mean |r| over reserved connections; conv scores are divided by the shared-position count."""
    if mask.layer_name != table.layer_name:
        raise AnalysisError(f"mask is for {mask.layer_name!r}, table for {table.layer_name!r}")
    keep = mask.matrix(spec)
    if not keep.any():
        raise AnalysisError("mask reserves no connection")
    vals = np.abs(table.r[keep])
    if table.kind == "conv":
        vals = vals / table.positions
    return float(vals.mean())


def complementarity(mask: DroppingMask, pairs: InputPairStats, spec: NetworkSpec) -> float:
    """Average, over output units, of the mean correlation among each unit's reserved in-neighbours.

    For conv layers each map's pairs are averaged over every output position.
    Units with fewer than two reserved in-neighbours are skipped.
    """
    if mask.layer_name != pairs.layer_name:
        raise AnalysisError(f"mask is for {mask.layer_name!r}, pair stats for {pairs.layer_name!r}")
    keep = mask.matrix(spec)
    corr = pairs.corr
    m = corr.shape[0]
    per_unit = []
    per_position = keep.shape[0] // m if pairs.kind == "local" else None
    for u in range(keep.shape[0]):
        taps = np.flatnonzero(keep[u])
        if taps.size < 2:
            continue
        iu = np.triu_indices(taps.size, k=1)
        if pairs.kind == "local":
            block = corr[u // per_position][np.ix_(taps, taps)]
            per_unit.append(block[iu].mean())
        else:  # fc (m == 1) and conv (average over positions)
            block = corr[:, taps][:, :, taps]
            per_unit.append(block[:, iu[0], iu[1]].mean())
    if not per_unit:
        raise AnalysisError("no output unit has two reserved in-neighbours")
    return float(np.mean(per_unit))


@dataclass(frozen=True)
class RankHistogram:
    """Reserved-weight counts per rank-percentile bin of one sign group.

    ``population`` counts every weight of the group per bin, so a mask that
    ignores magnitude should spread its counts in proportion to it.
    """

    sign: str
    edges: np.ndarray
    counts: np.ndarray
    population: np.ndarray

    def expected(self):
        return self.counts.sum() * self.population / self.population.sum()

    def chi_square(self):
        """Pearson statistic against the magnitude-blind expectation, and its p-value."""
        expected = self.expected()
        used = expected > 0
        stat = float(((self.counts[used] - expected[used]) ** 2 / expected[used]).sum())
        return stat, float(sps.chi2.sf(stat, df=int(used.sum()) - 1))

    def passes_uniformity(self, quantile: float = 0.99) -> bool:
        stat, _ = self.chi_square()
        return stat < sps.chi2.ppf(quantile, df=int((self.population > 0).sum()) - 1)


def magnitude_rank_histogram(mask: DroppingMask, weights, bins: int = 20) -> tuple:
    """Rank-percentile histograms of reserved weights, one per sign group.

    Each group is ranked by |w| descending (rank 0 = largest, ties to the
    lower index); rank j of a group of size G falls in bin ``j * bins // G``.
    Returns ``(positive, negative)``; an empty group yields all-zero counts.
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    kept = np.asarray(mask.bits).ravel()
    if kept.size != w.size:
        raise AnalysisError(f"mask has {kept.size} bits for {w.size} weights")
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = []
    for sign, group in (("positive", np.flatnonzero(w > 0)), ("negative", np.flatnonzero(w < 0))):
        counts = np.zeros(bins, dtype=np.int64)
        population = np.zeros(bins, dtype=np.int64)
        if group.size:
            order = np.lexsort((group, -np.abs(w[group])))
            rank = np.empty(group.size, dtype=np.int64)
            rank[order] = np.arange(group.size)
            which = rank * bins // group.size
            population = np.bincount(which, minlength=bins)
            counts = np.bincount(which[kept[group]], minlength=bins)
        out.append(RankHistogram(sign, edges, counts, population))
    return tuple(out)


def write_histograms(path, histograms):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sign", "bin_lo", "bin_hi", "count"])
        for h in histograms:
            for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts):
                writer.writerow([h.sign, repr(float(lo)), repr(float(hi)), int(c)])


def write_corr_tracking(path, rows):
    """``rows`` of ``(layer, stage, phase, mean_abs_corr)`` with phase in {before, after}."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "stage", "phase", "mean_abs_corr"])
        for layer, stage, phase, value in rows:
            writer.writerow([layer, stage, phase, repr(float(value))])


def write_complementarity(path, rows):
    """``rows`` of ``(criterion, seed, value)``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["criterion", "seed", "value"])
        for criterion, seed, value in rows:
            writer.writerow([criterion, seed, repr(float(value))])
