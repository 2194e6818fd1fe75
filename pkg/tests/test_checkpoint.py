import os

import numpy as np
import pytest

from lipdeq.equilibrium import solve_forward
from lipdeq.harness.checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from lipdeq.model import ModelConfig, build_model, classify
from lipdeq.solvers import SolverConfig


@pytest.fixture(scope="module")
def params32():
    return build_model(ModelConfig(n=2, channels=(2, 4), height=8, width=8, seed=11, dtype="float32"))


def test_round_trip_is_bitwise(tmp_path, params32):
    save_checkpoint(params32, tmp_path)
    back = load_checkpoint(tmp_path)
    assert back.cfg == params32.cfg
    assert back.tensors.keys() == params32.tensors.keys()
    for k, v in params32.tensors.items():
        assert back.tensors[k].dtype == v.dtype and back.tensors[k].tobytes() == v.tobytes(), k
    # power-iteration probes are stored at float32 precision
    for k, u in params32.u_state.items():
        assert np.array_equal(back.u_state[k], u.astype(np.float32)), k


def test_reloaded_model_gives_identical_logits(tmp_path, params32, rng):
    save_checkpoint(params32, tmp_path)
    back = load_checkpoint(tmp_path)
    x = rng.uniform(size=(4, 3, 8, 8)).astype(np.float32)
    a = classify(params32, solve_forward(params32, x, SolverConfig(), mode="eval").z_star)
    b = classify(back, solve_forward(back, x, SolverConfig(), mode="eval").z_star)
    assert a.tobytes() == b.tobytes()


def test_manifest_layout(tmp_path, params32):
    save_checkpoint(params32, tmp_path)
    fmt, items, tensors = read_manifest(tmp_path)
    assert fmt == "LDEQ1"
    assert ("model.n", "2") in items
    blob = (tmp_path / "weights.bin").read_bytes()
    offset = 0
    for name, shape, off in tensors:
        assert off == offset
        offset += 4 * int(np.prod(shape))
    assert offset == len(blob)
    # little-endian float32, row-major, in manifest order
    name, shape, off = tensors[0]
    ref = params32.tensors[name] if name in params32.tensors else params32.u_state[name[2:]]
    assert np.array_equal(np.frombuffer(blob, "<f4", int(np.prod(shape)), off).reshape(shape), ref)


def _rewrite(path, old, new):
    text = (path / "manifest.txt").read_text()
    assert old in text
    (path / "manifest.txt").write_text(text.replace(old, new, 1))


def test_version_gate(tmp_path, params32):
    save_checkpoint(params32, tmp_path)
    _rewrite(tmp_path, "format = LDEQ1", "format = LDEQ0")
    with pytest.raises(CheckpointError, match="LDEQ0"):
        load_checkpoint(tmp_path)


def test_truncated_blob_names_tensor(tmp_path, params32):
    save_checkpoint(params32, tmp_path)
    blob = tmp_path / "weights.bin"
    blob.write_bytes(blob.read_bytes()[:-1])
    last = read_manifest(tmp_path)[2][-1][0]
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(tmp_path)
    assert err.value.tensor == last and "truncated" in str(err.value)


def test_shape_mismatch_names_tensor(tmp_path, params32):
    save_checkpoint(params32, tmp_path)
    name, shape, off = read_manifest(tmp_path)[2][0]
    old = f"tensor.{name} = {'x'.join(map(str, shape))}|{off}"
    _rewrite(tmp_path, old, f"tensor.{name} = 1x{'x'.join(map(str, shape))}|{off}")
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(tmp_path)
    assert err.value.tensor == name and "shape" in str(err.value)


def test_missing_tensor_and_manifest(tmp_path, params32):
    save_checkpoint(params32, tmp_path)
    lines = (tmp_path / "manifest.txt").read_text().splitlines()
    dropped = next(l for l in lines if l.startswith("tensor."))
    (tmp_path / "manifest.txt").write_text("\n".join(l for l in lines if l != dropped) + "\n")
    with pytest.raises(CheckpointError, match="missing") as err:
        load_checkpoint(tmp_path)
    assert err.value.tensor == dropped.split("=")[0].strip()[len("tensor."):]
    with pytest.raises(CheckpointError, match="manifest"):
        load_checkpoint(os.path.join(tmp_path, "nowhere"))
