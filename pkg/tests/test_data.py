import numpy as np
import pytest

from lipdeq.harness.config import DataSpec
from lipdeq.harness.data import (Dataset, IdxFormatError, load_dataset, load_idx_dataset, read_idx,
                                 synthetic_dataset, write_idx)
from lipdeq.model import ModelConfig


def test_synthetic_is_deterministic_and_normalised():
    a = synthetic_dataset(500, classes=3, height=16, width=16, seed=1)
    b = synthetic_dataset(500, classes=3, height=16, width=16, seed=1)
    assert a.images.shape == (500, 3, 16, 16)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    assert np.bincount(a.labels).tolist() == [167, 167, 166]
    ba = list(a.batches(64, seed=1, epoch=2))
    bb = list(b.batches(64, seed=1, epoch=2))
    assert all(np.array_equal(x1, x2) and np.array_equal(y1, y2) for (x1, y1), (x2, y2) in zip(ba, bb))
    assert not np.array_equal(next(a.batches(64, seed=1, epoch=3))[1], ba[0][1])
    assert sum(len(y) for _, y in ba) == 500


def test_synthetic_seed_changes_data():
    a = synthetic_dataset(30, height=8, width=8, seed=1)
    b = synthetic_dataset(30, height=8, width=8, seed=2)
    assert not np.array_equal(a.images, b.images)


def test_linear_probe_on_raw_pixels_beats_chance():
    ds = synthetic_dataset(600, classes=3, height=16, width=16, seed=4)
    X = np.c_[ds.images.reshape(len(ds), -1), np.ones(len(ds))]
    Y = np.eye(3)[ds.labels]
    tr, te = slice(0, 400), slice(400, None)
    W, *_ = np.linalg.lstsq(X[tr], Y[tr], rcond=1e-6)
    acc = np.mean((X[te] @ W).argmax(1) == ds.labels[te])
    assert acc > 1 / 3 + 0.15


def test_dataset_length_mismatch():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 1, 2, 2)), np.zeros(2, dtype=int))


@pytest.mark.parametrize("dtype", ["uint8", "int8", "int16", "int32", "float32", "float64"])
def test_idx_round_trip(tmp_path, dtype, rng):
    a = (rng.uniform(0, 100, (4, 2, 3))).astype(dtype)
    p = tmp_path / "a.idx"
    write_idx(p, a)
    b = read_idx(p)
    assert b.dtype == a.dtype and np.array_equal(a, b)


def test_idx_header_is_big_endian(tmp_path):
    p = tmp_path / "a.idx"
    write_idx(p, np.arange(6, dtype=np.uint8).reshape(2, 3))
    raw = p.read_bytes()
    assert raw[:4] == bytes([0, 0, 0x08, 2])
    assert raw[4:12] == bytes([0, 0, 0, 2, 0, 0, 0, 3])


def test_idx_bad_magic_reports_offset(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(bytes([1, 0, 8, 1, 0, 0, 0, 1, 5]))
    with pytest.raises(IdxFormatError) as err:
        read_idx(p)
    assert err.value.offset == 0 and "magic" in str(err.value)
    p.write_bytes(bytes([0, 0, 0x42, 1, 0, 0, 0, 1, 5]))
    with pytest.raises(IdxFormatError) as err:
        read_idx(p)
    assert err.value.offset == 2
    p.write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 3, 5]))
    with pytest.raises(IdxFormatError, match="expected 3 data bytes"):
        read_idx(p)


def test_idx_dataset_count_mismatch(tmp_path):
    write_idx(tmp_path / "x.idx", np.zeros((5, 4, 4), dtype=np.uint8))
    write_idx(tmp_path / "y.idx", np.zeros(4, dtype=np.uint8))
    with pytest.raises(IdxFormatError, match="4 labels for 5 images"):
        load_idx_dataset(tmp_path / "x.idx", tmp_path / "y.idx")


def test_idx_dataset_uint8_scaling(tmp_path):
    img = np.array([[[0, 255], [51, 102]]], dtype=np.uint8)
    write_idx(tmp_path / "x.idx", img)
    write_idx(tmp_path / "y.idx", np.array([2], dtype=np.uint8))
    ds = load_idx_dataset(tmp_path / "x.idx", tmp_path / "y.idx")
    assert ds.images.shape == (1, 1, 2, 2)
    assert np.allclose(ds.images[0, 0], [[0, 1], [0.2, 0.4]])
    assert ds.labels.tolist() == [2]


def test_load_dataset_dispatch(tmp_path):
    cfg = ModelConfig(n=2, channels=(2, 4), height=8, width=8, in_channels=1, dtype="float32")
    ds = load_dataset(DataSpec(n_samples=12), cfg, seed=3)
    assert ds.images.shape == (12, 1, 8, 8) and ds.images.dtype == np.float32
    write_idx(tmp_path / "x.idx", np.zeros((3, 8, 8), dtype=np.uint8))
    write_idx(tmp_path / "y.idx", np.zeros(3, dtype=np.uint8))
    spec = DataSpec(source="idx", images=str(tmp_path / "x.idx"), labels=str(tmp_path / "y.idx"))
    assert load_dataset(spec, cfg).images.shape == (3, 1, 8, 8)
    with pytest.raises(ValueError, match="model expects"):
        load_dataset(spec, ModelConfig(n=2, channels=(2, 4), height=16, width=16, in_channels=1))
