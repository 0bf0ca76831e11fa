import gzip
import struct

import numpy as np
import pytest

from conftest import random_net, tiny_spec
from sparsenet.checkpoint import (
    CheckpointError,
    DigestMismatch,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from sparsenet.data import DataError, Dataset, load_idx_dataset, read_idx, synthetic_shapes, write_idx
from sparsenet.masks import DroppingMask


def masked_net(seed=0):
    spec = tiny_spec()
    net = random_net(spec, seed)
    net.stage = 2
    rng = np.random.default_rng(seed)
    masks = {n: DroppingMask(n, rng.random(spec.weight_shape(n)) < 0.3, 0.3) for n in ("f", "l1")}
    for m in masks.values():
        net.params[m.layer_name]["W"] *= m.bits
    return net, masks


def test_roundtrip_is_byte_identical(tmp_path):
    net, masks = masked_net()
    save_checkpoint(net, masks, tmp_path / "a.spcn")
    loaded, lmasks = load_checkpoint(tmp_path / "a.spcn", net.spec)
    assert loaded.stage == 2 and lmasks == masks
    save_checkpoint(loaded, lmasks, tmp_path / "b.spcn")
    assert (tmp_path / "a.spcn").read_bytes() == (tmp_path / "b.spcn").read_bytes()
    for name in net.spec.prunable_layers:
        np.testing.assert_array_equal(loaded.params[name]["W"], net.params[name]["W"].astype(np.float32))


def test_header_layout():
    net, masks = masked_net()
    raw = encode_checkpoint(net, masks)
    assert raw[:4] == b"SPCN"
    assert struct.unpack("<H", raw[4:6]) == (1,)
    assert raw[6:38] == net.spec.digest()
    assert struct.unpack("<II", raw[38:46]) == (2, len(net.spec.prunable_layers))


def test_size_is_floats_plus_mask_bits():
    net, masks = masked_net()
    dense = len(encode_checkpoint(net, {}))
    with_masks = len(encode_checkpoint(net, masks))
    extra = sum(8 + 2 + len(n) + 8 + (m.bits.size + 7) // 8 for n, m in masks.items())
    assert with_masks - dense == extra


@pytest.mark.parametrize("offset", [0, 10, 100, -3])
def test_flipped_byte_rejected(offset):
    net, masks = masked_net()
    raw = bytearray(encode_checkpoint(net, masks))
    raw[offset] ^= 0x40
    with pytest.raises(CheckpointError):
        decode_checkpoint(bytes(raw), net.spec)


def test_truncation_rejected():
    net, masks = masked_net()
    with pytest.raises(CheckpointError):
        decode_checkpoint(encode_checkpoint(net, masks)[:-20], net.spec)


def test_other_spec_rejected():
    net, masks = masked_net()
    with pytest.raises(DigestMismatch):
        decode_checkpoint(encode_checkpoint(net, masks), tiny_spec(fc_out=6))


def test_write_replaces_atomically(tmp_path):
    net, masks = masked_net()
    path = tmp_path / "x.spcn"
    path.write_bytes(b"old")
    save_checkpoint(net, masks, path)
    assert path.read_bytes()[:4] == b"SPCN"
    assert [p.name for p in tmp_path.iterdir()] == ["x.spcn"]


# --- IDX and datasets -------------------------------------------------------------------


def test_idx_roundtrip_plain_and_gz(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
    write_idx(tmp_path / "a.idx", arr)
    np.testing.assert_array_equal(read_idx(tmp_path / "a.idx"), arr)
    with gzip.open(tmp_path / "a.idx.gz", "wb") as fh:
        fh.write((tmp_path / "a.idx").read_bytes())
    np.testing.assert_array_equal(read_idx(tmp_path / "a.idx.gz"), arr)


def test_idx_reads_big_endian_floats(tmp_path):
    vals = np.array([1.5, -2.0], dtype=">f4")
    (tmp_path / "f.idx").write_bytes(bytes([0, 0, 0x0D, 1]) + struct.pack(">I", 2) + vals.tobytes())
    np.testing.assert_array_equal(read_idx(tmp_path / "f.idx"), [1.5, -2.0])


def test_idx_errors(tmp_path):
    (tmp_path / "bad.idx").write_bytes(b"\x01\x02\x08\x01")
    with pytest.raises(DataError):
        read_idx(tmp_path / "bad.idx")
    (tmp_path / "short.idx").write_bytes(bytes([0, 0, 8, 1]) + struct.pack(">I", 5) + b"\x00")
    with pytest.raises(DataError, match="payload"):
        read_idx(tmp_path / "short.idx")


def test_idx_dataset_scaling(tmp_path):
    write_idx(tmp_path / "x.idx", np.full((3, 2, 2), 255, np.uint8))
    write_idx(tmp_path / "y.idx", np.array([0, 1, 2], np.uint8))
    X, y = load_idx_dataset(tmp_path / "x.idx", tmp_path / "y.idx")
    assert X.shape == (3, 2, 2, 1) and X.max() == 1.0 and y.dtype == np.int64
    write_idx(tmp_path / "y2.idx", np.array([0, 1], np.uint8))
    with pytest.raises(DataError):
        load_idx_dataset(tmp_path / "x.idx", tmp_path / "y2.idx")


def test_split_sizes_and_disjointness():
    X = np.arange(1000, dtype=float).reshape(1000, 1, 1, 1)
    y = np.zeros(1000, int)
    d = Dataset.split(X, y, test_fraction=0.2, stats_fraction=0.1, stats_min=256, seed=3)
    assert (len(d.X_train), len(d.X_test), len(d.X_stats)) == (544, 200, 256)
    ids = np.concatenate([d.X_train, d.X_test, d.X_stats]).ravel()
    assert sorted(ids) == list(range(1000))


def test_synthetic_shapes_reproducible_and_balanced():
    X1, y1 = synthetic_shapes(500, seed=4)
    X2, y2 = synthetic_shapes(500, seed=4)
    np.testing.assert_array_equal(X1, X2)
    np.testing.assert_array_equal(y1, y2)
    assert X1.shape == (500, 24, 20, 1) and 0 <= X1.min() and X1.max() <= 1
    assert np.bincount(y1, minlength=10).min() >= 25  # labels are drawn uniformly
