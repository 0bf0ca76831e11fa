import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_net, tiny_spec
from sparsenet.layers import LayerSpec, NetworkSpec, forward, layer_input, layer_output_activation
from sparsenet.stats import (
    StatsError,
    collect,
    collect_input_pairs,
    correlation_table,
    correlations_conv,
    correlations_fc_local,
)


def pearson_oracle(a, b):
    """Population Pearson coefficient by explicit loops; 0 when either side is constant."""
    n = len(a)
    if a.min() == a.max() or b.min() == b.max():
        return 0.0
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b)) / n
    sa = np.sqrt(sum((x - ma) ** 2 for x in a) / n)
    sb = np.sqrt(sum((y - mb) ** 2 for y in b) / n)
    return cov / (sa * sb)


def stored_views(net, X, name):
    """Every output and fan-in value of one layer, stored per sample, via explicit indexing."""
    spec = net.spec
    layer = spec.layer(name)
    res = forward(net, X)
    x = layer_input(res, spec, name)
    a = layer_output_activation(res, spec, name)
    n = len(X)
    if layer.kind == "fc":
        return a.reshape(n, 1, -1), x.reshape(n, 1, -1)
    kh, kw = layer.kernel
    s, p = layer.stride, layer.padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    oh, ow, _ = spec.shapes[name]
    c = x.shape[-1]
    b = np.zeros((n, oh * ow, c * kh * kw))
    for oy in range(oh):
        for ox in range(ow):
            for ci in range(c):
                for ky in range(kh):
                    for kx in range(kw):
                        b[:, oy * ow + ox, ci * kh * kw + ky * kw + kx] = xp[:, oy * s + ky, ox * s + kx, ci]
    return a.reshape(n, oh * ow, -1), b


def oracle_table(net, X, name):
    a, b = stored_views(net, X, name)
    m, u, k = a.shape[1], a.shape[2], b.shape[2]
    r = np.zeros((m, u, k))
    for pos in range(m):
        for i in range(u):
            for j in range(k):
                r[pos, i, j] = pearson_oracle(a[:, pos, i], b[:, pos, j])
    if net.spec.layer(name).kind == "conv":
        return np.abs(r).sum(axis=0)
    return r.reshape(-1, k)


def small_spec(seed):
    rng = np.random.default_rng(seed)
    return tiny_spec(channels=int(rng.integers(1, 3)), hw=(int(rng.integers(4, 7)), int(rng.integers(4, 7))),
                     conv_out=int(rng.integers(2, 4)), local_out=int(rng.integers(2, 4)),
                     fc_out=int(rng.integers(2, 5)))


@pytest.mark.parametrize("name", ["c1", "l1", "f", "cls"])
def test_matches_store_everything_oracle(name):
    for seed in range(20):
        spec = small_spec(seed)
        net = random_net(spec, seed)
        X = np.random.default_rng(100 + seed).normal(size=(30, *spec.input_shape))
        table = correlation_table(net, X, name, batch_size=7)
        np.testing.assert_allclose(table.r, oracle_table(net, X, name), atol=1e-10, rtol=0)


def test_batching_and_merge_do_not_change_result(net):
    X = np.random.default_rng(0).normal(size=(40, *net.spec.input_shape))
    whole = correlation_table(net, X, "l1", batch_size=40).r
    chunked = correlation_table(net, X, "l1", batch_size=3).r
    np.testing.assert_allclose(chunked, whole, atol=1e-12)
    a = collect(net, X[:17], ["f"])["f"]
    b = collect(net, X[17:], ["f"])["f"]
    merged = correlations_fc_local(a.merge(b)).r
    np.testing.assert_allclose(merged, correlation_table(net, X, "f").r, atol=1e-12)


def test_conv_chunked_positions_match_single_pass(net):
    X = np.random.default_rng(1).normal(size=(25, *net.spec.input_shape))
    full = correlation_table(net, X, "c1").r
    chunked = correlation_table(net, X, "c1", max_pair_entries=2 * 3 * 18)
    np.testing.assert_allclose(chunked.r, full, atol=1e-12)
    assert chunked.positions == 30


def test_conv_scores_bounded_by_positions(net):
    X = np.random.default_rng(2).normal(size=(25, *net.spec.input_shape))
    t = correlation_table(net, X, "c1")
    assert np.all(t.r >= 0) and np.all(t.r <= t.positions + 1e-12)


def test_dead_unit_is_degenerate():
    spec = tiny_spec()
    net = random_net(spec)
    net.params["f"]["W"][0] = 0.0
    net.params["f"]["b"][0] = -1.0  # relu output stays 0
    X = np.random.default_rng(3).normal(size=(20, *spec.input_shape))
    t = correlation_table(net, X, "f")
    assert np.all(t.degenerate[0]) and np.all(t.r[0] == 0.0)
    res = forward(net, X)
    x = layer_input(res, spec, "f").reshape(20, -1)
    a = layer_output_activation(res, spec, "f")
    expected = (a.min(axis=0) == a.max(axis=0))[:, None] | (x.min(axis=0) == x.max(axis=0))[None, :]
    np.testing.assert_array_equal(t.degenerate, expected)
    assert not expected.all()


def test_needs_two_samples(net):
    with pytest.raises(StatsError):
        correlation_table(net, np.zeros((1, *net.spec.input_shape)), "f")


def test_kind_guards(net):
    X = np.random.default_rng(4).normal(size=(5, *net.spec.input_shape))
    accs = collect(net, X, ["c1", "f"])
    with pytest.raises(StatsError):
        correlations_fc_local(accs["c1"])
    with pytest.raises(StatsError):
        correlations_conv(accs["f"])


@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_positive_input_scaling_leaves_coefficients(scale, seed):
    spec = NetworkSpec((1, 1, 6), [LayerSpec("f", "fc", out_channels=3), LayerSpec("r", "relu")], 3)
    net = random_net(spec, seed)
    X = np.random.default_rng(seed).normal(size=(30, 1, 1, 6))
    net.params["f"]["b"][:] = 0  # makes relu(W(sx)) = s * relu(Wx)
    base = correlation_table(net, X, "f").r
    scaled = correlation_table(net, X * scale, "f").r
    np.testing.assert_allclose(scaled, base, atol=1e-9)


def test_input_pairs_symmetric_unit_diagonal(net):
    X = np.random.default_rng(5).normal(size=(30, *net.spec.input_shape))
    pairs = collect_input_pairs(net, X, "f")
    c = pairs.corr[0]
    np.testing.assert_allclose(c, c.T, atol=1e-12)
    live = ~pairs.degenerate[0].diagonal()
    np.testing.assert_allclose(c.diagonal()[live], 1.0, atol=1e-12)


def test_table_csv(tmp_path, net):
    X = np.random.default_rng(6).normal(size=(10, *net.spec.input_shape))
    t = correlation_table(net, X, "cls")
    t.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "layer,i,k,r,degenerate"
    assert len(lines) == 1 + t.r.size
