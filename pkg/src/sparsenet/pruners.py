"""Connection selection criteria. Each one turns a layer into a :class:`DroppingMask`.

Correlation family (``correlation``, ``random``, ``highest_only``): every
output unit ranks its fan-in connections by correlation score and draws
``round(S * G)`` of each sign group, a ``lam`` share of them from the
higher-ranked half. ``random`` is ``lam = 0.5`` and ``highest_only`` is
``lam = 1``; both still sample at random within the chosen half.

Weight-based baselines rank the whole layer at once: ``magnitude`` by |w|
within each sign, ``obd`` by a diagonal-curvature saliency, and ``brp``
by what survives L1-regularized training with periodic thresholding.

All sorts break ties toward the lower fan-in (or flat weight) index.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .layers import Network, backward, forward, layer_input, patches
from .masks import DroppingMask
from .stats import CorrelationTable

CRITERIA = ("correlation", "random", "highest_only", "magnitude", "obd", "brp")
CORRELATION_FAMILY = ("correlation", "random", "highest_only")
_FIXED_LAMBDA = {"random": 0.5, "highest_only": 1.0}


class PruneError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionPolicy:
    criterion: str
    sparsity: float
    lam: float = 0.75
    seed: int = 0
    l1_coeff: float = 1e-4
    check_every: int = 200
    brp_steps: int = 2000

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise PruneError(f"unknown criterion {self.criterion!r}; expected one of {CRITERIA}")
        if not 0.0 < self.sparsity <= 1.0:
            raise PruneError(f"sparsity must be in (0, 1], got {self.sparsity}")
        if not 0.5 <= self.lam <= 1.0:
            raise PruneError(f"lambda must be in [0.5, 1], got {self.lam}")
        if self.l1_coeff <= 0:
            raise PruneError("l1_coeff must be > 0")
        if self.check_every < 1:
            raise PruneError("check_every must be >= 1")

    @property
    def effective_lambda(self) -> float:
        return _FIXED_LAMBDA.get(self.criterion, self.lam)

    def rng(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed))


@dataclass
class PruneReport:
    layer_name: str
    criterion: str
    sparsity: float
    lam: float
    kept_pos: int
    kept_neg: int
    total: int
    unit_counts: np.ndarray = field(repr=False)
    forced_trim: bool = False

    CSV_COLUMNS = ("layer", "criterion", "S", "lambda", "kept_pos", "kept_neg", "kept_total", "total",
                   "realized_sparsity", "forced_trim")

    @property
    def kept_total(self) -> int:
        return int(self.unit_counts.sum())

    @property
    def realized_sparsity(self) -> float:
        return self.kept_total / self.total

    def csv_row(self) -> list:
        return [self.layer_name, self.criterion, repr(self.sparsity), repr(self.lam), self.kept_pos,
                self.kept_neg, self.kept_total, self.total, repr(self.realized_sparsity), int(self.forced_trim)]


def write_reports(path, reports):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PruneReport.CSV_COLUMNS)
        for report in reports:
            writer.writerow(report.csv_row())


def _report(spec, mask, policy, sign_source, forced_trim=False):
    """``sign_source`` is the ``(units, K)`` matrix whose signs split the counts."""
    keep = mask.matrix(spec)
    pos = int(np.count_nonzero(keep & (sign_source >= 0)))
    return PruneReport(mask.layer_name, policy.criterion, policy.sparsity, policy.effective_lambda,
                       pos, int(keep.sum()) - pos, keep.size, keep.sum(axis=1), forced_trim)


def _check_fan_in(name, fan_in, sparsity):
    if sparsity * fan_in < 1:
        raise PruneError(f"layer {name!r}: S*K = {sparsity}*{fan_in} < 1 leaves no connection per unit")


# --- correlation family ------------------------------------------------------


def descending_order(scores) -> np.ndarray:
    """Indices sorting ``scores`` high to low, ties to the lower index."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(scores.size), -scores))


def split_sample(ranked: np.ndarray, target: int, n_high: int, rng) -> np.ndarray:
    """Draw ``target`` entries of an already-ranked group, ``n_high`` from its top half.

    The top half is the first ``ceil(G/2)`` entries. A half that cannot
    supply its share passes the shortfall to the other half.
    """
    g = ranked.size
    top, bottom = ranked[: (g + 1) // 2], ranked[(g + 1) // 2 :]
    n_high = min(n_high, top.size, target)
    n_low = target - n_high
    if n_low > bottom.size:
        n_high += n_low - bottom.size
        n_low = bottom.size
    picked_hi = rng.choice(top, size=n_high, replace=False) if n_high else top[:0]
    picked_lo = rng.choice(bottom, size=n_low, replace=False) if n_low else bottom[:0]
    return np.concatenate([picked_hi, picked_lo])


def _sign_groups(r_row):
    idx = np.arange(r_row.size)
    nonneg = idx[r_row >= 0]
    neg = idx[r_row < 0]
    return nonneg[descending_order(r_row[nonneg])], neg[descending_order(-r_row[neg])]


def prune_correlation_fc_local(table: CorrelationTable, policy: SelectionPolicy, spec) -> tuple:
    """Per-unit, per-sign λ-split sampling on a signed correlation table.

    Returns ``(mask, report)``.
    """
    if policy.criterion not in CORRELATION_FAMILY:
        raise PruneError(f"criterion {policy.criterion!r} does not use correlations")
    if table.kind not in ("fc", "local"):
        raise PruneError(f"table of layer {table.layer_name!r} is {table.kind}; use prune_correlation_conv")
    r = np.asarray(table.r, dtype=np.float64)
    units, k = r.shape
    _check_fan_in(table.layer_name, k, policy.sparsity)
    s, lam = policy.sparsity, policy.effective_lambda
    rng = policy.rng()
    keep = np.zeros((units, k), dtype=bool)
    for u in range(units):
        chosen = []
        for ranked in _sign_groups(r[u]):
            g = ranked.size
            if g == 0:
                continue
            t = round(s * g)
            n_hi = min(round(lam * t), (g + 1) // 2)
            chosen.append(split_sample(ranked, t, n_hi, rng))
        picked = np.concatenate(chosen) if chosen else np.zeros(0, dtype=int)
        if picked.size == 0:
            picked = descending_order(np.abs(r[u]))[:1]
        keep[u, picked] = True
    mask = DroppingMask.from_matrix(spec, table.layer_name, keep, s)
    return mask, _report(spec, mask, policy, r)


def prune_correlation_conv(table: CorrelationTable, policy: SelectionPolicy, spec) -> tuple:
    """Per-map λ-split sampling on summed correlation magnitudes; one pick reserves a shared weight."""
    if policy.criterion not in CORRELATION_FAMILY:
        raise PruneError(f"criterion {policy.criterion!r} does not use correlations")
    if table.kind != "conv":
        raise PruneError(f"table of layer {table.layer_name!r} is {table.kind}; use prune_correlation_fc_local")
    r = np.asarray(table.r, dtype=np.float64)
    if np.any(r < 0):
        raise PruneError("conv scores are summed magnitudes and cannot be negative")
    maps, k = r.shape
    _check_fan_in(table.layer_name, k, policy.sparsity)
    s, lam = policy.sparsity, policy.effective_lambda
    t = max(round(s * k), 1)
    n_hi = min(round(lam * s * k), (k + 1) // 2)
    rng = policy.rng()
    keep = np.zeros((maps, k), dtype=bool)
    for o in range(maps):
        keep[o, split_sample(descending_order(r[o]), t, n_hi, rng)] = True
    mask = DroppingMask.from_matrix(spec, table.layer_name, keep, s)
    return mask, _report(spec, mask, policy, r)


def prune_correlation(table: CorrelationTable, policy: SelectionPolicy, spec):
    if table.kind == "conv":
        return prune_correlation_conv(table, policy, spec)
    return prune_correlation_fc_local(table, policy, spec)


# --- weight-based baselines --------------------------------------------------


def magnitude_keep(W, sparsity: float) -> np.ndarray:
    """Boolean array shaped like ``W``: top ``round(S*|W+|)`` positives and ``round(S*|W-|)`` negatives."""
    w = np.asarray(W, dtype=np.float64).ravel()
    if not np.any(w):
        raise PruneError("cannot rank an all-zero layer by magnitude")
    keep = np.zeros(w.size, dtype=bool)
    for group in (np.flatnonzero(w > 0), np.flatnonzero(w < 0)):
        count = round(sparsity * group.size)
        keep[group[descending_order(np.abs(w[group]))[:count]]] = True
    return keep.reshape(np.shape(W))


def prune_magnitude(net: Network, name: str, policy: SelectionPolicy):
    W = net.params[name]["W"]
    try:
        keep = magnitude_keep(W, policy.sparsity)
    except PruneError as exc:
        raise PruneError(f"layer {name!r}: {exc}") from None
    mask = DroppingMask(name, keep, policy.sparsity)
    return mask, _report(net.spec, mask, policy, net.weight_matrix(name))


def _top_count(scores, count):
    keep = np.zeros(scores.size, dtype=bool)
    keep[descending_order(scores.ravel())[:count]] = True
    return keep


def fisher_diagonal(net: Network, X, y, name: str, batch_size: int = 64) -> np.ndarray:
    """Mean over samples of the squared per-sample loss gradient of each weight, ``(units, K)``.

    Per-sample gradients are rebuilt from the batch's upstream gradients and
    the layer's fan-in patches (the batch-mean loss scales them by ``1/n``).
    """
    spec = net.spec
    layer = spec.layer(name)
    units, k = spec.matrix_shape(name)
    acc = np.zeros((units, k))
    for i in range(0, len(X), batch_size):
        xb, yb = X[i : i + batch_size], y[i : i + batch_size]
        n = len(xb)
        res = forward(net, xb, mode="eval", keep_cache=True)
        _, _, up = backward(net, res, yb, return_upstream=True)
        g_out = up[name] * n  # (n, M, U) gradients of each sample's own loss
        x_in = layer_input(res, spec, name)
        if layer.kind == "fc":
            acc += np.einsum("nu,nk->uk", g_out[:, 0] ** 2, x_in.reshape(n, -1) ** 2)
            continue
        cols, _ = patches(x_in, layer)  # (n, M, K)
        if layer.kind == "local":
            acc += np.einsum("nmu,nmk->muk", g_out**2, cols**2).reshape(units, k)
        else:
            for j in range(n):
                acc += (g_out[j].T @ cols[j]) ** 2
    return acc / len(X)


def obd_saliency(W_matrix, h_diag) -> np.ndarray:
    return 0.5 * h_diag * W_matrix**2


def prune_obd(net: Network, X, y, name: str, policy: SelectionPolicy):
    """Keep the ``round(S*|W|)`` weights of largest saliency ``h * w^2 / 2``.

    Falls back to |w| ranking (with a warning) when every curvature estimate is zero.
    """
    spec = net.spec
    wm = net.weight_matrix(name)
    h = fisher_diagonal(net, X, y, name)
    scores = obd_saliency(wm, h)
    if not np.any(h):
        warnings.warn(f"layer {name!r}: curvature estimate is zero everywhere; ranking by magnitude", RuntimeWarning)
        scores = np.abs(wm)
    keep = _top_count(scores, round(policy.sparsity * wm.size)).reshape(wm.shape)
    mask = DroppingMask.from_matrix(spec, name, keep, policy.sparsity)
    return mask, _report(spec, mask, policy, wm)


class _BRPState:
    """Permanent-zeroing bookkeeping for one layer during L1 training."""

    def __init__(self, net, name, target, check_every):
        self.name = name
        self.target = target
        self.check_every = check_every
        self.alive = net.params[name]["W"] != 0
        self.trace = [int(self.alive.sum())]
        self.done = self.trace[0] <= target

    def check(self, step, net, loss):
        W = net.params[self.name]["W"]
        W[~self.alive] = 0.0
        if self.done or (step + 1) % self.check_every:
            return
        mags = np.abs(W[self.alive])
        cut = self.alive & (np.abs(W) < 0.1 * mags.mean())
        if self.alive.sum() - cut.sum() < self.target:
            self._trim_to_target(W)
        else:
            self.alive &= ~cut
            W[cut] = 0.0
            if self.alive.sum() <= self.target:
                self._trim_to_target(W)
        self.trace.append(int(self.alive.sum()))
        self.done = self.alive.sum() <= self.target

    def _trim_to_target(self, W):
        flat_alive = self.alive.ravel()
        scores = np.where(flat_alive, np.abs(W.ravel()), -1.0)
        keep = _top_count(scores, self.target) & flat_alive
        self.alive = keep.reshape(W.shape)
        W[~self.alive] = 0.0


class _StopTraining(Exception):
    pass


def prune_brp(net: Network, X, y, name: str, policy: SelectionPolicy, cfg=None, masks=(), rng=None):
    """L1-regularized training of ``net`` (in place) with periodic permanent zeroing.

    Every ``check_every`` steps, surviving weights below one tenth of the
    surviving mean |w| are zeroed for good. Stops as soon as at most
    ``round(S*|W|)`` survive, trimming by smallest |w| to land exactly on that
    count. If ``brp_steps`` run out first the layer is force-trimmed and the
    report's ``forced_trim`` flag is set. Returns ``(mask, report, trace)``
    where ``trace`` lists survivor counts at each check.
    """
    from .training import TrainConfig, train_steps

    spec = net.spec
    total = spec.weight_count(name)
    target = round(policy.sparsity * total)
    if target < 1:
        raise PruneError(f"layer {name!r}: S*|W| rounds to zero weights")
    cfg = cfg or TrainConfig()
    rng = rng if rng is not None else policy.rng()
    state = _BRPState(net, name, target, policy.check_every)
    forced = False
    if not state.done:

        def callback(step, net_, loss):
            state.check(step, net_, loss)
            if state.done:
                raise _StopTraining

        try:
            train_steps(net, X, y, policy.brp_steps, cfg, rng, masks=masks, callback=callback,
                        l1={name: policy.l1_coeff})
        except _StopTraining:
            pass
        if not state.done:
            forced = True
            warnings.warn(f"layer {name!r}: BRP step budget exhausted; trimming to target", RuntimeWarning)
            state._trim_to_target(net.params[name]["W"])
            state.trace.append(int(state.alive.sum()))
    mask = DroppingMask(name, state.alive.copy(), policy.sparsity)
    report = _report(spec, mask, policy, net.weight_matrix(name), forced)
    return mask, report, state.trace


def prune_layer(net: Network, name: str, policy: SelectionPolicy, stats_data=None, stats_labels=None,
                train_data=None, train_labels=None, cfg=None, masks=(), table: CorrelationTable | None = None):
    """Dispatch to the criterion's pruner; returns ``(mask, report)``.

    Correlation criteria need ``table`` (or ``stats_data`` to build one); OBD
    needs labelled ``stats_data``; BRP trains on ``train_data`` in place.
    """
    spec = net.spec
    if not spec.layer(name).prunable:
        spec.connectivity(name)  # raises NotPrunableError
    _check_fan_in(name, spec.connectivity(name).fan_in, policy.sparsity)
    c = policy.criterion
    if c in CORRELATION_FAMILY:
        if table is None:
            if stats_data is None:
                raise PruneError("correlation pruning needs a correlation table or statistics data")
            from .stats import correlation_table

            table = correlation_table(net, stats_data, name)
        return prune_correlation(table, policy, spec)
    if c == "magnitude":
        return prune_magnitude(net, name, policy)
    if c == "obd":
        if stats_data is None or stats_labels is None:
            raise PruneError("OBD needs labelled data for curvature estimation")
        return prune_obd(net, stats_data, stats_labels, name, policy)
    if train_data is None or train_labels is None:
        raise PruneError("BRP needs a training stream")
    mask, report, _ = prune_brp(net, train_data, train_labels, name, policy, cfg=cfg, masks=masks)
    return mask, report
