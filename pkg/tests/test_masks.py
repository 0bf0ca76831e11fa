import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_net, tiny_spec
from sparsenet.layers import LayerSpec, Network, NetworkSpec, NotPrunableError, backward, forward
from sparsenet.masks import (
    DroppingMask,
    MaskError,
    apply_masks,
    clip_after_update,
    count_violations,
    densify_equivalent,
)
from sparsenet.training import SGD


def random_masks(spec, rng, p=0.5):
    return [DroppingMask(n, rng.random(spec.weight_shape(n)) < p, p) for n in spec.prunable_layers]


def test_identity_mask_changes_nothing(net):
    before = {n: p["W"].copy() for n, p in net.params.items()}
    apply_masks(net, [DroppingMask.ones(net.spec, n) for n in net.spec.prunable_layers])
    for n in before:
        np.testing.assert_array_equal(net.params[n]["W"], before[n])


def test_zero_mask_fc_outputs_bias():
    spec = NetworkSpec((3, 3, 1), [LayerSpec("f", "fc", out_channels=4)], 4)
    net = random_net(spec)
    apply_masks(net, DroppingMask("f", np.zeros((4, 9), bool)))
    x = np.random.default_rng(0).normal(size=(5, 3, 3, 1))
    np.testing.assert_array_equal(forward(net, x).logits, np.broadcast_to(net.params["f"]["b"], (5, 4)))


def test_apply_matches_elementwise_product(net):
    rng = np.random.default_rng(1)
    masks = random_masks(net.spec, rng)
    expected = {m.layer_name: net.params[m.layer_name]["W"] * m.bits for m in masks}
    apply_masks(net, masks)
    for name, w in expected.items():
        np.testing.assert_array_equal(net.params[name]["W"], w)


def test_apply_is_idempotent(net):
    masks = random_masks(net.spec, np.random.default_rng(2))
    once = apply_masks(net.copy(), masks)
    twice = apply_masks(apply_masks(net.copy(), masks), masks)
    for n in net.spec.prunable_layers:
        np.testing.assert_array_equal(once.params[n]["W"], twice.params[n]["W"])


def test_size_mismatch_reports_counts(net):
    with pytest.raises(MaskError, match="3 bits.*54 weights"):
        apply_masks(net, DroppingMask("c1", np.ones(3, bool)))


def test_mask_on_pool_rejected(net):
    with pytest.raises(NotPrunableError):
        apply_masks(net, DroppingMask("pool1", np.ones(4, bool)))


def test_clip_after_sgd_step(net, batch):
    X, y = batch
    masks = random_masks(net.spec, np.random.default_rng(3))
    apply_masks(net, masks)
    _, grads = backward(net, forward(net, X, mode="train", rng_seed=0), y)
    dropped = ~masks[0].bits
    assert np.any(grads["c1"]["W"][dropped] != 0)
    SGD(0.0).step(net, grads, 0.1)
    updated = {n: p["W"].copy() for n, p in net.params.items()}
    clip_after_update(net, masks)
    assert count_violations(net, masks) == 0
    for m in masks:
        np.testing.assert_array_equal(net.params[m.layer_name]["W"][m.bits], updated[m.layer_name][m.bits])


def test_masked_weights_stay_zero_over_100_steps(net, batch):
    from sparsenet.training import TrainConfig, train_steps

    X, y = batch
    masks = random_masks(net.spec, np.random.default_rng(4))
    seen = []
    train_steps(net, X, y, 100, TrainConfig(batch_size=4), np.random.default_rng(0), masks=masks,
                callback=lambda step, n, loss: seen.append(count_violations(n, masks)))
    assert len(seen) == 100 and not any(seen)


@given(st.integers(0, 2**32 - 1), st.integers(1, 300))
def test_bytes_roundtrip(seed, n):
    bits = np.random.default_rng(seed).random(n) < 0.3
    mask = DroppingMask("5b", bits)
    raw = mask.to_bytes()
    assert len(raw) == 2 + 2 + 8 + (n + 7) // 8
    again, end = DroppingMask.from_bytes(raw)
    assert end == len(raw) and again == mask


def test_bytes_layout_lsb_first():
    raw = DroppingMask("a", np.array([1, 0, 0, 0, 0, 0, 0, 0, 0, 1], bool)).to_bytes()
    assert raw == b"\x01\x00" + b"a" + (10).to_bytes(8, "little") + bytes([0b00000001, 0b00000010])


def test_truncated_mask_record():
    raw = DroppingMask("a", np.ones(20, bool)).to_bytes()
    with pytest.raises(MaskError):
        DroppingMask.from_bytes(raw[:-1])


def test_matrix_view_and_counts(spec):
    keep = np.zeros(spec.matrix_shape("l1"), bool)
    keep[:, 0] = True
    mask = DroppingMask.from_matrix(spec, "l1", keep, 0.1)
    assert mask.bits.shape == spec.weight_shape("l1")
    np.testing.assert_array_equal(mask.unit_counts(spec), np.ones(keep.shape[0]))
    assert mask.kept == keep.shape[0]


# --- structurally pruned forward vs masked dense forward ---------------------


def _single(kind, seed):
    rng = np.random.default_rng(seed)
    h, w, c = rng.integers(4, 7), rng.integers(4, 7), rng.integers(1, 4)
    if kind == "fc":
        layer = LayerSpec("x", "fc", out_channels=int(rng.integers(1, 6)))
    else:
        k = int(rng.integers(1, 4))
        layer = LayerSpec("x", kind, kernel=(k, int(rng.integers(1, 4))), stride=int(rng.integers(1, 3)),
                          padding=int(rng.integers(0, 2)), out_channels=int(rng.integers(1, 5)))
    spec = NetworkSpec((int(h), int(w), int(c)), [layer], 1)
    net = random_net(spec, seed)
    mask = DroppingMask("x", rng.random(spec.weight_shape("x")) < rng.uniform(0.1, 0.9))
    return spec, net, mask, rng.normal(size=(3, h, w, c))


@pytest.mark.parametrize("kind", ["fc", "local", "conv"])
def test_sparse_dense_equivalence(kind):
    for seed in range(50):
        spec, net, mask, x = _single(kind, seed)
        apply_masks(net, mask)
        dense = forward(net, x).activations["x"]
        sparse, _ = densify_equivalent(net, mask).forward(x)
        np.testing.assert_allclose(sparse["x"], dense, atol=1e-10, rtol=0)


def test_identity_mask_sparse_forward_exact_whole_net(net, batch):
    X, _ = batch
    sparse = densify_equivalent(net, [])
    _, logits = sparse.forward(X)
    np.testing.assert_allclose(logits, forward(net, X).logits, atol=1e-12)
    assert sum(sparse.nnz().values()) == net.spec.total_weights()


def test_conv_sparse_layer_applies_same_taps_everywhere():
    spec = NetworkSpec((5, 5, 1), [LayerSpec("x", "conv", kernel=3, out_channels=1)], 1)
    net = Network(spec)
    net.params["x"]["W"][0, 0, 1, 2] = 1.0  # single surviving tap: (ky=1, kx=2)
    sparse = densify_equivalent(net, DroppingMask("x", net.params["x"]["W"] != 0))
    (taps, _), = sparse.layers["x"].units
    assert list(taps) == [5]
    x = np.random.default_rng(0).normal(size=(1, 5, 5, 1))
    acts, _ = sparse.forward(x)
    np.testing.assert_array_equal(acts["x"][0, :, :, 0], x[0, 1:4, 2:5, 0])
