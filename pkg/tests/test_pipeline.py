import numpy as np
import pytest

from conftest import tiny_spec
from sparsenet.checkpoint import load_checkpoint
from sparsenet.data import Dataset, synthetic_shapes
from sparsenet.layers import NotPrunableError
from sparsenet.masks import count_violations
from sparsenet.pipeline import (
    PlanError,
    SparsityPlan,
    Stage,
    format_fraction,
    parse_fraction,
    run_from_scratch_control,
    run_pipeline,
    run_stage,
    scratch_config,
    train_baseline,
)
from sparsenet.training import TrainConfig


@pytest.fixture(scope="module")
def small():
    spec = tiny_spec(channels=1, hw=(8, 8), classes=3, conv_out=3, local_out=4, fc_out=6)
    X, y = synthetic_shapes(240, (8, 8), 1, 3, seed=0)
    data = Dataset.split(X, y, test_fraction=0.2, stats_fraction=0.2, stats_min=32, seed=0)
    cfg = TrainConfig(steps_baseline=60, steps_retrain=30, batch_size=16, base_lr=0.05)
    return spec, data, cfg


def test_plan_parse_and_print():
    plan = SparsityPlan.parse("f:1/256, 5b:1/128:random,5a:1/32:correlation:0.9")
    assert plan.stages == (Stage("f", 1 / 256), Stage("5b", 1 / 128, "random"),
                           Stage("5a", 1 / 32, "correlation", 0.9))
    assert SparsityPlan.parse(plan.to_string()) == plan
    assert SparsityPlan.parse("").stages == ()


def test_fraction_helpers():
    assert parse_fraction("1/128") == 1 / 128
    assert format_fraction(1 / 128) == "1/128"
    assert format_fraction(1.0) == "1"
    with pytest.raises(PlanError):
        parse_fraction("1/0")


@pytest.mark.parametrize("text,error", [
    ("zz:1/2", PlanError),
    ("pool1:1/2", NotPrunableError),
    ("f:1/2,f:1/4", PlanError),
    ("l1:1/2,f:1/2", PlanError),   # bottom-up order
    ("f:1/128", PlanError),        # S*K < 1 for K = 8
    ("f:0", PlanError),
    ("f:1/2:bogus", PlanError),
    ("f:1/2:correlation:0.2", PlanError),
    ("f", PlanError),
])
def test_plan_errors(text, error):
    with pytest.raises(error):
        SparsityPlan.parse(text).validate(tiny_spec())


def test_any_order_allows_bottom_up():
    SparsityPlan.parse("l1:1/2,f:1/2", any_order=True).validate(tiny_spec())


def test_empty_plan_returns_baseline(small, tmp_path):
    spec, data, cfg = small
    res = run_pipeline(spec, SparsityPlan(), data, cfg, out_dir=tmp_path)
    base, _ = train_baseline(spec, data, cfg)
    assert len(res.records) == 1 and res.masks == {}
    for name in spec.prunable_layers:
        np.testing.assert_array_equal(res.network.params[name]["W"], base.params[name]["W"])
    assert sorted(p.name for p in tmp_path.iterdir()) == ["N0.spcn", "stages.csv"]


def test_three_stages_write_four_checkpoints(small, tmp_path):
    spec, data, cfg = small
    plan = SparsityPlan.parse("cls:1/2,f:1/4,l1:1/2")
    res = run_pipeline(spec, plan, data, cfg, out_dir=tmp_path)
    assert [p.name for p in sorted(tmp_path.glob("N*.spcn"))] == ["N0.spcn", "N1.spcn", "N2.spcn", "N3.spcn"]
    lines = (tmp_path / "stages.csv").read_text().splitlines()
    assert lines[0].split(",") == ["stage", "layer", "S", "criterion", "train_loss", "train_acc", "eval_acc",
                                   "realized_sparsity", "compression_ratio"]
    assert [line.split(",")[1] for line in lines[1:]] == ["", "cls", "f", "l1"]
    ratios = [r.compression_ratio for r in res.records]
    assert ratios[0] == 1.0 and all(a > b for a, b in zip(ratios, ratios[1:]))
    # every earlier mask still holds in the final network
    assert set(res.masks) == {"cls", "f", "l1"}
    assert count_violations(res.network, list(res.masks.values())) == 0
    net, masks = load_checkpoint(tmp_path / "N3.spcn", spec)
    assert set(masks) == {"cls", "f", "l1"}
    np.testing.assert_array_equal(net.params["f"]["W"], res.network.params["f"]["W"].astype(np.float32))
    for rec in res.records[1:]:
        assert rec.corr_before is not None and rec.corr_after is not None


def test_warm_start_is_previous_weights_times_mask(small):
    spec, data, cfg = small
    prev, _ = train_baseline(spec, data, cfg)
    snapshot = prev.copy()
    frozen = TrainConfig(steps_baseline=60, steps_retrain=1, batch_size=16, base_lr=1e-300)
    net, _, mask, _ = run_stage(prev, Stage("f", 1 / 2), 1, data, frozen, {})
    np.testing.assert_array_equal(net.params["f"]["W"], snapshot.params["f"]["W"] * mask.bits)
    for name in spec.prunable_layers:
        np.testing.assert_array_equal(prev.params[name]["W"], snapshot.params[name]["W"])


def test_full_density_stage_keeps_all(small):
    spec, data, cfg = small
    prev, _ = train_baseline(spec, data, cfg)
    _, rec, mask, _ = run_stage(prev, Stage("f", 1.0), 1, data, cfg, {})
    assert mask.bits.all() and rec.realized_sparsity == 1.0


def test_pipeline_is_reproducible(small, tmp_path):
    spec, data, cfg = small
    plan = SparsityPlan.parse("f:1/4:random")
    run_pipeline(spec, plan, data, cfg, out_dir=tmp_path / "a")
    run_pipeline(spec, plan, data, cfg, out_dir=tmp_path / "b")
    for name in ("N0.spcn", "N1.spcn", "stages.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_step_callback_sees_masks(small):
    spec, data, cfg = small
    seen = []
    run_pipeline(spec, SparsityPlan.parse("f:1/4"), data, cfg, track_correlation=False,
                 step_callback=lambda stage, step, net, masks: seen.append((stage, count_violations(net, list(masks.values())))))
    assert len(seen) == cfg.steps_baseline + cfg.steps_retrain
    assert all(v == 0 for _, v in seen)
    assert {s for s, _ in seen} == {0, 1}


def test_scratch_budget_and_stretch():
    cfg = TrainConfig()
    steps, speed = scratch_config(cfg, 3)
    assert steps == 4000 + 3 * 2000
    assert speed == pytest.approx(3429 / (10000 - 1429))
    assert scratch_config(cfg, 0) == (4000, 1.0)


def test_scratch_control_with_identity_masks(small):
    spec, data, cfg = small
    net, rec = run_from_scratch_control(spec, {}, data, cfg, stages=1)
    assert len(rec.losses) == cfg.steps_baseline + cfg.steps_retrain
    assert rec.compression_ratio == 1.0 and np.isfinite(rec.train_acc)


def test_scratch_control_respects_masks(small):
    spec, data, cfg = small
    res = run_pipeline(spec, SparsityPlan.parse("f:1/4"), data, cfg, track_correlation=False)
    net, rec = run_from_scratch_control(spec, res.masks, data, cfg)
    assert count_violations(net, list(res.masks.values())) == 0
    assert rec.compression_ratio == pytest.approx(res.final.compression_ratio)
    assert rec.checkpoint is None
