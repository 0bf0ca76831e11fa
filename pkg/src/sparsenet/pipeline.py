"""Iterative layer-wise sparsification.

Train a dense N_0, then for each planned stage m: score the connections of
layer L_m on N_{m-1}, build its dropping mask, copy N_{m-1}'s weights into
N_m and retrain under every mask built so far. Stages run from the output
end of the network toward the input.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .analysis import realized_compression, selected_corr_mean
from .checkpoint import atomic_write_text, save_checkpoint
from .data import Dataset
from .layers import Network, NetworkSpec, NotPrunableError, evaluate
from .pruners import CORRELATION_FAMILY, CRITERIA, SelectionPolicy, prune_brp, prune_correlation, prune_layer
from .seeding import derive_seed, stream
from .stats import correlation_table
from .training import TrainConfig, train_steps

log = logging.getLogger(__name__)


class PlanError(ValueError):
    pass


def parse_fraction(text: str) -> float:
    try:
        value = Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise PlanError(f"cannot read sparsity {text!r}") from None
    return float(value)


def format_fraction(value: float) -> str:
    if not np.isfinite(value):
        return repr(value)
    frac = Fraction(value).limit_denominator(1 << 20)
    if float(frac) != value:
        return repr(value)
    return str(frac.numerator) if frac.denominator == 1 else f"{frac.numerator}/{frac.denominator}"


@dataclass(frozen=True)
class Stage:
    layer: str
    sparsity: float
    criterion: str = "correlation"
    lam: float = 0.75

    def __post_init__(self):
        if not 0.0 < self.sparsity <= 1.0:
            raise PlanError(f"stage {self.layer!r}: sparsity must be in (0, 1], got {self.sparsity}")
        if self.criterion not in CRITERIA:
            raise PlanError(f"stage {self.layer!r}: unknown criterion {self.criterion!r}")
        if not 0.5 <= self.lam <= 1.0:
            raise PlanError(f"stage {self.layer!r}: lambda must be in [0.5, 1], got {self.lam}")

    def to_string(self, default_criterion="correlation", default_lam=0.75) -> str:
        text = f"{self.layer}:{format_fraction(self.sparsity)}"
        if self.criterion != default_criterion or self.lam != default_lam:
            text += f":{self.criterion}"
            if self.lam != default_lam:
                text += f":{self.lam!r}"
        return text


@dataclass(frozen=True)
class SparsityPlan:
    stages: tuple = ()
    any_order: bool = False

    @classmethod
    def parse(cls, text: str, criterion: str = "correlation", lam: float = 0.75, any_order: bool = False):
        """Read ``"f:1/256,5b:1/128:random,5a:1/32:correlation:0.9"``."""
        stages = []
        for item in filter(None, (p.strip() for p in text.split(","))):
            fields_ = item.split(":")
            if not 2 <= len(fields_) <= 4:
                raise PlanError(f"bad stage {item!r}; expected layer:S[:criterion[:lambda]]")
            name, s = fields_[0].strip(), parse_fraction(fields_[1])
            crit = fields_[2].strip() if len(fields_) > 2 else criterion
            try:
                stage_lam = float(fields_[3]) if len(fields_) > 3 else lam
            except ValueError:
                raise PlanError(f"bad lambda in stage {item!r}") from None
            stages.append(Stage(name, s, crit, stage_lam))
        return cls(tuple(stages), any_order)

    def to_string(self, criterion="correlation", lam=0.75) -> str:
        return ",".join(st.to_string(criterion, lam) for st in self.stages)

    def validate(self, spec: NetworkSpec) -> "SparsityPlan":
        seen = set()
        for st in self.stages:
            try:
                layer = spec.layer(st.layer)
            except KeyError:
                raise PlanError(f"plan names unknown layer {st.layer!r}") from None
            if not layer.prunable:
                raise NotPrunableError(f"layer {st.layer!r} ({layer.kind}) is not prunable")
            if st.layer in seen:
                raise PlanError(f"layer {st.layer!r} appears twice in the plan")
            seen.add(st.layer)
            k = spec.connectivity(st.layer).fan_in
            if st.sparsity * k < 1:
                raise PlanError(f"stage {st.layer!r}: S*K = {st.sparsity}*{k} < 1")
        if not self.any_order:
            idx = [spec.index(st.layer) for st in self.stages]
            if idx != sorted(idx, reverse=True):
                raise PlanError("stages must run from the output end toward the input (set any_order to override)")
        return self


@dataclass
class StageRecord:
    stage: int
    layer: str | None
    sparsity: float
    criterion: str
    lam: float
    masks: dict
    train_loss: float
    train_acc: float
    eval_acc: float
    realized_sparsity: float
    compression_ratio: float
    corr_before: float | None = None
    corr_after: float | None = None
    checkpoint: str | None = None
    losses: list = field(default_factory=list, repr=False)

    CSV_COLUMNS = ("stage", "layer", "S", "criterion", "train_loss", "train_acc", "eval_acc",
                   "realized_sparsity", "compression_ratio")

    def csv_row(self):
        return [self.stage, self.layer or "", format_fraction(self.sparsity), self.criterion or "",
                repr(self.train_loss), repr(self.train_acc), repr(self.eval_acc),
                repr(self.realized_sparsity), repr(self.compression_ratio)]


def stages_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(StageRecord.CSV_COLUMNS)
    for rec in records:
        writer.writerow(rec.csv_row())
    return buf.getvalue()


def _measure(net, data: Dataset, masks, stage, layer, sparsity, criterion, lam, losses, realized=1.0):
    train_loss, train_acc = evaluate(net, data.X_train, data.y_train)
    _, eval_acc = evaluate(net, data.X_test, data.y_test) if len(data.X_test) else (float("nan"), float("nan"))
    ratio = realized_compression(net.spec, masks).ratio
    return StageRecord(stage, layer, sparsity, criterion, lam, dict(masks), train_loss, train_acc, eval_acc,
                       realized, ratio, losses=list(losses))


def train_baseline(spec: NetworkSpec, data: Dataset, cfg: TrainConfig, step_callback=None):
    """Dense N_0 trained for ``steps_baseline`` steps. Returns ``(net, record)``."""
    if len(data.X_train) == 0:
        raise ValueError("training set is empty")
    net = Network.initialize(spec, stream(cfg.seed, "init"), cfg.init_scale)
    cb = None if step_callback is None else (lambda step, n, loss: step_callback(0, step, n, {}))
    tlog = train_steps(net, data.X_train, data.y_train, cfg.steps_baseline, cfg, stream(cfg.seed, "train", 0),
                       callback=cb)
    record = _measure(net, data, {}, 0, None, 1.0, "", float("nan"), tlog.losses)
    return net, record


def build_mask(net: Network, stage: Stage, data: Dataset, cfg: TrainConfig, masks: dict, index: int,
               policy_overrides=None):
    """Mask for one stage from ``net`` (unchanged). Returns ``(mask, report, table)``.

    ``table`` is the correlation table used (``None`` for other criteria).
    """
    seed = derive_seed(cfg.seed, "prune", index, stage.layer)
    policy = SelectionPolicy(stage.criterion, stage.sparsity, stage.lam, seed, **(policy_overrides or {}))
    if stage.criterion in CORRELATION_FAMILY:
        table = correlation_table(net, data.X_stats, stage.layer)
        mask, report = prune_correlation(table, policy, net.spec)
        return mask, report, table
    if stage.criterion == "brp":
        scratch = net.copy()
        mask, report, _ = prune_brp(scratch, data.X_train, data.y_train, stage.layer, policy, cfg=cfg,
                                    masks=list(masks.values()), rng=stream(cfg.seed, "brp", index))
        return mask, report, None
    mask, report = prune_layer(net, stage.layer, policy, stats_data=data.X_stats, stats_labels=data.y_stats)
    return mask, report, None


def run_stage(prev: Network, stage: Stage, index: int, data: Dataset, cfg: TrainConfig, masks: dict,
              track_correlation: bool = True, step_callback=None, policy_overrides=None):
    """Stage ``index`` (1-based): mask ``stage.layer`` from ``prev``, warm-start and retrain.

    ``masks`` holds the masks of earlier stages and is not modified.
    Returns ``(net, record, mask, report)``.
    """
    mask, report, table = build_mask(prev, stage, data, cfg, masks, index, policy_overrides)
    all_masks = {**masks, stage.layer: mask}
    net = prev.copy()
    net.stage = index
    cb = None
    if step_callback is not None:
        def cb(step, n, loss):
            step_callback(index, step, n, all_masks)
    tlog = train_steps(net, data.X_train, data.y_train, cfg.steps_retrain, cfg, stream(cfg.seed, "train", index),
                       masks=list(all_masks.values()), speed=cfg.retrain_speed, callback=cb)
    record = _measure(net, data, all_masks, index, stage.layer, stage.sparsity, stage.criterion, stage.lam,
                      tlog.losses, mask.realized_sparsity)
    if track_correlation and table is not None:
        record.corr_before = selected_corr_mean(mask, table, net.spec)
        record.corr_after = selected_corr_mean(mask, correlation_table(net, data.X_stats, stage.layer), net.spec)
    log.info("stage %d (%s S=%s %s): train_acc=%.4f eval_acc=%.4f", index, stage.layer,
             format_fraction(stage.sparsity), stage.criterion, record.train_acc, record.eval_acc)
    return net, record, mask, report


@dataclass
class PipelineResult:
    network: Network
    records: list
    masks: dict
    reports: list

    @property
    def final(self) -> StageRecord:
        return self.records[-1]


def run_pipeline(spec: NetworkSpec, plan: SparsityPlan, data: Dataset, cfg: TrainConfig, out_dir=None,
                 track_correlation: bool = True, step_callback=None, policy_overrides=None) -> PipelineResult:
    """Baseline then every stage of ``plan``.

    With ``out_dir`` set, writes ``N{m}.spcn`` after each model and
    ``stages.csv`` at the end. ``step_callback(stage, step, net, masks)``
    runs after every optimizer step of every phase.
    """
    plan.validate(spec)
    out = Path(out_dir) if out_dir is not None else None
    net, record = train_baseline(spec, data, cfg, step_callback)
    records, reports, masks = [record], [], {}
    if out is not None:
        record.checkpoint = str(out / "N0.spcn")
        save_checkpoint(net, masks, record.checkpoint)
    for m, stage in enumerate(plan.stages, start=1):
        net, record, mask, report = run_stage(net, stage, m, data, cfg, masks, track_correlation, step_callback,
                                              policy_overrides)
        masks = {**masks, stage.layer: mask}
        records.append(record)
        reports.append(report)
        if out is not None:
            record.checkpoint = str(out / f"N{m}.spcn")
            save_checkpoint(net, masks, record.checkpoint)
    if out is not None:
        atomic_write_text(out / "stages.csv", stages_csv(records))
    return PipelineResult(net, records, masks, reports)


def scratch_config(cfg: TrainConfig, stages: int) -> tuple:
    """``(steps, speed)`` for the from-scratch control.

    The budget is the warm-started run's total; the speed stretches the
    baseline's decay curve so its full range spans the control's main phase.
    """
    steps = cfg.steps_baseline + stages * cfg.steps_retrain
    main = steps - cfg.fine_tune_steps(steps)
    return steps, cfg.reference_main_steps / main


def run_from_scratch_control(spec: NetworkSpec, masks: dict, data: Dataset, cfg: TrainConfig, stages: int | None = None):
    """Freshly initialized network trained under fixed ``masks`` for the combined budget.

    ``stages`` is the number of retraining phases in the run being compared
    against (defaults to the number of masks). Returns ``(net, record)``.
    """
    stages = len(masks) if stages is None else stages
    steps, speed = scratch_config(cfg, stages)
    net = Network.initialize(spec, stream(cfg.seed, "scratch", "init"), cfg.init_scale)
    net.stage = stages
    tlog = train_steps(net, data.X_train, data.y_train, steps, replace(cfg, from_scratch=True),
                       stream(cfg.seed, "scratch", "train"), masks=list(masks.values()), speed=speed)
    realized = float(np.mean([m.realized_sparsity for m in masks.values()])) if masks else 1.0
    return net, _measure(net, data, masks, stages, "scratch", float("nan") if masks else 1.0, "scratch",
                         float("nan"), tlog.losses, realized)
