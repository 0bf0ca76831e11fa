import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsenet.analysis import (
    AnalysisError,
    complementarity,
    compression_ratio,
    magnitude_rank_histogram,
    realized_compression,
    selected_corr_mean,
    write_histograms,
)
from sparsenet.architectures import face_baseline_spec
from sparsenet.layers import LayerSpec, NetworkSpec
from sparsenet.masks import DroppingMask
from sparsenet.pipeline import SparsityPlan
from sparsenet.stats import CorrelationTable, InputPairStats

PLAN_ROWS = [
    ("", 1.0),
    ("f:1/256", 0.96),
    ("f:1/256,5b:1/128", 0.76),
    ("f:1/256,5b:1/128,4b:1/2", 0.74),
    ("f:1/256,5b:1/128,5a:1/2", 0.43),
    ("f:1/256,5b:1/128,5a:1/32", 0.12),
    ("f:1/256,5b:1/128,5a:1/4", 0.26),
    ("f:1/256,5b:1/128,5a:1/8", 0.18),
    ("f:1/256,5b:1/128,5a:1/16", 0.14),
]


@pytest.mark.parametrize("text,ratio", PLAN_ROWS)
def test_face_plan_ratios(text, ratio):
    assert abs(compression_ratio(face_baseline_spec(), SparsityPlan.parse(text)).ratio - ratio) <= 0.01


def test_empty_plan_is_exactly_one():
    assert compression_ratio(face_baseline_spec(), {}).ratio == 1.0


def test_layer_sums_equal_totals():
    spec = face_baseline_spec()
    summary = compression_ratio(spec, [("5a", 0.5)])
    assert summary.total == spec.total_weights()
    assert summary.kept == spec.total_weights() - spec.weight_count("5a") + round(spec.weight_count("5a") / 2)


@given(st.sampled_from(["f", "5b", "5a", "4b"]), st.integers(0, 8), st.integers(0, 8))
def test_ratio_monotone_in_sparsity(layer, a, b):
    spec = face_baseline_spec()
    lo, hi = sorted((2.0**-a, 2.0**-b))
    assert compression_ratio(spec, {layer: lo}).ratio <= compression_ratio(spec, {layer: hi}).ratio


def test_ratio_rejects_pool():
    from sparsenet.layers import NotPrunableError

    with pytest.raises(NotPrunableError):
        compression_ratio(face_baseline_spec(), {"pool1": 0.5})


def test_realized_matches_planned_for_exact_masks():
    spec = NetworkSpec((1, 1, 8), [LayerSpec("f", "fc", out_channels=4)], 4)
    bits = np.zeros((4, 8), bool)
    bits[:, :2] = True
    assert realized_compression(spec, [DroppingMask("f", bits)]).ratio == compression_ratio(spec, {"f": 0.25}).ratio


# --- selected correlation mean ---------------------------------------------------------------


def fc(k, units):
    return NetworkSpec((1, 1, k), [LayerSpec("f", "fc", out_channels=units)], units)


def test_all_ones_mask_is_mean_abs():
    r = np.random.default_rng(0).uniform(-1, 1, size=(3, 7))
    table = CorrelationTable("f", "fc", r, np.zeros(r.shape, bool))
    assert selected_corr_mean(DroppingMask.ones(fc(7, 3), "f"), table, fc(7, 3)) == pytest.approx(np.abs(r).mean())


def test_top_one_per_unit_is_mean_of_maxima():
    r = np.random.default_rng(1).uniform(-1, 1, size=(5, 9))
    bits = np.zeros(r.shape, bool)
    bits[np.arange(5), np.abs(r).argmax(axis=1)] = True
    table = CorrelationTable("f", "fc", r, np.zeros(r.shape, bool))
    assert selected_corr_mean(DroppingMask("f", bits), table, fc(9, 5)) == pytest.approx(np.abs(r).max(axis=1).mean())


def test_selected_mean_filter_then_average_oracle():
    rng = np.random.default_rng(2)
    r = rng.uniform(-1, 1, size=(6, 11))
    bits = rng.random(r.shape) < 0.4
    table = CorrelationTable("f", "fc", r, np.zeros(r.shape, bool))
    values = [abs(r[i, j]) for i in range(6) for j in range(11) if bits[i, j]]
    assert abs(selected_corr_mean(DroppingMask("f", bits), table, fc(11, 6)) - sum(values) / len(values)) < 1e-12


def test_conv_selected_mean_divides_by_positions():
    spec = NetworkSpec((3, 3, 1), [LayerSpec("c", "conv", kernel=2, out_channels=1)], 1)
    r = np.array([[4.0, 2.0, 0.0, 1.0]])
    table = CorrelationTable("c", "conv", r, np.zeros(r.shape, bool), 4)
    mask = DroppingMask("c", np.array([1, 1, 0, 0], bool).reshape(spec.weight_shape("c")))
    assert selected_corr_mean(mask, table, spec) == pytest.approx(0.75)


def test_selected_mean_guards():
    r = np.ones((1, 4))
    table = CorrelationTable("f", "fc", r, np.zeros(r.shape, bool))
    with pytest.raises(AnalysisError):
        selected_corr_mean(DroppingMask("f", np.zeros((1, 4), bool)), table, fc(4, 1))
    with pytest.raises(AnalysisError):
        selected_corr_mean(DroppingMask("g", np.ones((1, 4), bool)), table, fc(4, 1))


# --- complementarity ------------------------------------------------------------------------------


def pairs_from_streams(streams):
    c = np.corrcoef(streams.T)
    return InputPairStats("f", "fc", c[None], np.zeros((1, *c.shape), bool))


def test_identical_streams_give_one():
    x = np.random.default_rng(0).normal(size=200)
    pairs = pairs_from_streams(np.stack([x, x, x], axis=1))
    assert complementarity(DroppingMask("f", np.ones((2, 3), bool)), pairs, fc(3, 2)) == pytest.approx(1.0)


def test_independent_streams_near_zero():
    n = 20_000
    streams = np.random.default_rng(1).normal(size=(n, 6))
    pairs = pairs_from_streams(streams)
    value = complementarity(DroppingMask("f", np.ones((3, 6), bool)), pairs, fc(6, 3))
    assert abs(value) < 4 / np.sqrt(n)


def test_complementarity_skips_single_inputs():
    x = np.random.default_rng(2).normal(size=(100, 3))
    pairs = pairs_from_streams(x)
    bits = np.array([[1, 0, 0], [1, 1, 0]], bool)
    assert complementarity(DroppingMask("f", bits), pairs, fc(3, 2)) == pytest.approx(pairs.corr[0, 0, 1])
    with pytest.raises(AnalysisError):
        complementarity(DroppingMask("f", np.eye(2, 3, dtype=bool)), pairs, fc(3, 2))


# --- magnitude-rank histograms ---------------------------------------------------------------------


def test_top_mask_fills_first_bins():
    w = np.random.default_rng(0).normal(size=4000)
    keep = np.zeros(w.size, bool)
    for group in (np.flatnonzero(w > 0), np.flatnonzero(w < 0)):
        keep[group[np.argsort(-np.abs(w[group]))[: group.size // 10]]] = True
    pos, neg = magnitude_rank_histogram(DroppingMask("x", keep), w, bins=20)
    for h, sign in ((pos, 1), (neg, -1)):
        assert h.counts[2:].sum() == 0
        assert h.counts.sum() == keep[np.sign(w) == sign].sum()


def test_random_masks_pass_uniformity():
    rng = np.random.default_rng(1)
    passes = 0
    for _ in range(100):
        w = rng.normal(size=2000)
        keep = np.zeros(w.size, bool)
        keep[rng.choice(w.size, 250, replace=False)] = True
        pos, neg = magnitude_rank_histogram(DroppingMask("x", keep), w)
        passes += pos.passes_uniformity() and neg.passes_uniformity()
    assert passes >= 95


def test_histogram_guards_and_csv(tmp_path):
    with pytest.raises(AnalysisError):
        magnitude_rank_histogram(DroppingMask("x", np.ones(3, bool)), np.ones(4))
    pos, neg = magnitude_rank_histogram(DroppingMask("x", np.ones(4, bool)), np.array([1.0, 2.0, 3.0, 4.0]), bins=4)
    assert list(pos.counts) == [1, 1, 1, 1] and neg.counts.sum() == 0
    write_histograms(tmp_path / "h.csv", [pos, neg])
    assert (tmp_path / "h.csv").read_text().splitlines()[1] == "positive,0.0,0.25,1"
