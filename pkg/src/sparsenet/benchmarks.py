"""Multi-seed comparison harnesses on the desk-scale task."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, load_idx_dataset, synthetic_shapes
from .pipeline import (
    SparsityPlan,
    Stage,
    format_fraction,
    run_from_scratch_control,
    run_pipeline,
    run_stage,
    train_baseline,
)

log = logging.getLogger(__name__)


def load_dataset(source, seed: int) -> Dataset:
    """Materialize a :class:`~sparsenet.config.DatasetSource`."""
    if source.kind == "synthetic":
        X, y = synthetic_shapes(source.samples, source.image_hw, source.channels, source.classes, seed=seed,
                                noise=source.noise)
        return Dataset.split(X, y, source.test_fraction, source.stats_fraction, source.stats_min, seed=seed)
    X, y = load_idx_dataset(source.train_images, source.train_labels)
    if source.test_images:
        Xt, yt = load_idx_dataset(source.test_images, source.test_labels)
        d = Dataset.split(X, y, 0.0, source.stats_fraction, source.stats_min, seed=seed)
        return replace(d, X_test=Xt, y_test=yt)
    return Dataset.split(X, y, source.test_fraction, source.stats_fraction, source.stats_min, seed=seed)


@dataclass
class ScratchComparison:
    seed: int
    warm_train_error: float
    scratch_train_error: float

    @property
    def warm_wins(self) -> bool:
        return self.scratch_train_error > self.warm_train_error


def scratch_vs_warm(cfg, seeds, plan: SparsityPlan | None = None) -> list:
    """Paired warm-started pipeline vs from-scratch control, one pair per seed."""
    plan = plan or cfg.plan
    out = []
    for seed in seeds:
        run = cfg.with_seed(seed)
        data = load_dataset(run.data, seed)
        res = run_pipeline(run.spec, plan, data, run.train, track_correlation=False,
                           policy_overrides=run.prune.policy_overrides())
        _, ctrl = run_from_scratch_control(run.spec, res.masks, data, run.train, stages=len(plan.stages))
        pair = ScratchComparison(seed, 1.0 - res.final.train_acc, 1.0 - ctrl.train_acc)
        log.info("seed %d: warm %.4f scratch %.4f", seed, pair.warm_train_error, pair.scratch_train_error)
        out.append(pair)
    return out


def write_scratch_csv(path, pairs):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "warm_train_error", "scratch_train_error", "warm_wins"])
        for p in pairs:
            writer.writerow([p.seed, repr(p.warm_train_error), repr(p.scratch_train_error), int(p.warm_wins)])


@dataclass
class ScoreRow:
    layer: str
    sparsity: float
    criterion: str
    accuracies: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0


def criterion_scoreboard(cfg, seeds, comparisons, criteria) -> list:
    """Eval accuracy per selection criterion at matched sparsity.

    ``comparisons`` is a list of ``(prefix, layer, S)``: ``prefix`` is a plan
    string of stages pruned by correlation first (shared by all criteria and
    reused across comparisons with the same prefix), then ``layer`` is pruned
    to ``S`` by each criterion in turn and retrained. Returns one
    :class:`ScoreRow` per (comparison, criterion).
    """
    rows = {(layer, s, c): ScoreRow(layer, s, c, []) for _, layer, s in comparisons for c in criteria}
    overrides = cfg.prune.policy_overrides()
    for seed in seeds:
        run = cfg.with_seed(seed)
        data = load_dataset(run.data, seed)
        base, _ = train_baseline(run.spec, data, run.train)
        prefixes = {(): (base, {})}
        for prefix_text, layer, s in comparisons:
            prefix = SparsityPlan.parse(prefix_text, lam=run.prune.lam).stages
            for depth in range(1, len(prefix) + 1):
                key = prefix[:depth]
                if key not in prefixes:
                    net, masks = prefixes[key[:-1]]
                    net, _, mask, _ = run_stage(net, key[-1], depth, data, run.train, masks,
                                                track_correlation=False, policy_overrides=overrides)
                    prefixes[key] = (net, {**masks, key[-1].layer: mask})
            net, masks = prefixes[prefix]
            SparsityPlan(prefix + (Stage(layer, s),)).validate(run.spec)
            for c in criteria:
                stage = Stage(layer, s, c, run.prune.lam)
                _, rec, _, _ = run_stage(net, stage, len(prefix) + 1, data, run.train, masks,
                                         track_correlation=False, policy_overrides=overrides)
                rows[(layer, s, c)].accuracies.append(rec.eval_acc)
                log.info("seed %d %s:%s %s eval_acc=%.4f", seed, layer, s, c, rec.eval_acc)
    return list(rows.values())


def write_scoreboard(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "S", "criterion", "seeds", "mean_eval_acc", "std_eval_acc"])
        for r in rows:
            writer.writerow([r.layer, format_fraction(r.sparsity), r.criterion, len(r.accuracies),
                             repr(r.mean), repr(r.std)])


def pooled_std(a: ScoreRow, b: ScoreRow) -> float:
    return float(np.sqrt((a.std**2 + b.std**2) / 2.0))
