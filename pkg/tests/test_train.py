import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from lipdeq.budget import calibrate_slope
from lipdeq.harness import train as train_mod
from lipdeq.harness.checkpoint import load_checkpoint
from lipdeq.harness.config import parse_config
from lipdeq.harness.data import synthetic_dataset
from lipdeq.harness.train import (METRICS_COLUMNS, Adam, TrainingAborted, evaluate, train, train_step)
from lipdeq.model import build_model, certified_bound
from lipdeq.solvers import DivergenceError

TINY = """
[model]
n = 2
channels = 2, 4
height = 8
width = 8
[train]
epochs = 1
batch_size = 16
lr = 0.01
seed = 3
[data]
n_samples = 48
"""


def tiny_run(tmp_path, *overrides):
    return parse_config(TINY, [f"train.out_dir={tmp_path}", *overrides])


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_adam_matches_closed_form_first_steps():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(p, lr=0.1)
    g = np.array([0.5, -3.0])
    opt.step(p, {"w": g})
    # bias-corrected first step moves each coordinate by lr * sign(g)
    assert np.allclose(p["w"], [0.9, -1.9], atol=1e-8)
    opt.step(p, {"w": g})
    assert np.allclose(p["w"], [0.8, -1.8], atol=1e-7)


def test_first_batch_loss_is_near_uniform(tmp_path):
    run = tiny_run(tmp_path)
    params = build_model(run.model)
    ds = synthetic_dataset(48, 3, 8, 8, seed=3, dtype=run.model.dtype)
    x, y = next(ds.batches(16, seed=3, epoch=1))
    row = train_step(params, Adam(params.tensors, run.lr), x, y, run, np.random.default_rng(0), 1, 1)
    assert abs(row.loss - math.log(3)) <= 0.2 * math.log(3)
    assert row.fwd_nfes <= run.solver_fwd.max_iter and row.bwd_nfes <= run.solver_bwd.max_iter
    assert row.budget_L == pytest.approx(certified_bound(params).L)


def test_train_writes_metrics_and_checkpoints(tmp_path):
    run = tiny_run(tmp_path, "train.epochs=2")
    params, rows = train(run)
    assert len(rows) == 2 * 3
    table = read_metrics(tmp_path / "metrics.csv")
    assert tuple(table[0]) == METRICS_COLUMNS
    assert len(table) == 1 + len(rows)
    assert [int(r[0]) for r in table[1:]] == [1, 1, 1, 2, 2, 2]
    assert [int(r[1]) for r in table[1:]] == list(range(1, 7))
    for r in table[1:]:
        assert r[2] == f"{float(r[2]):.6g}"
    for r in rows:
        assert 1 <= r.fwd_nfes <= run.solver_fwd.max_iter and 1 <= r.bwd_nfes <= run.solver_bwd.max_iter
    for d in ("epoch001", "epoch002", "last"):
        assert (tmp_path / d / "manifest.txt").exists()
    last = load_checkpoint(tmp_path / "last")
    assert all(np.array_equal(last.tensors[k], v) for k, v in params.tensors.items())


def test_metrics_are_deterministic_under_fixed_seed(tmp_path):
    a = tiny_run(tmp_path / "a")
    b = tiny_run(tmp_path / "b")
    train(a)
    train(b)
    wall = METRICS_COLUMNS.index("wall_ms")
    strip = lambda t: [r[:wall] + r[wall + 1:] for r in t]
    assert strip(read_metrics(tmp_path / "a" / "metrics.csv")) == strip(read_metrics(tmp_path / "b" / "metrics.csv"))


def test_jfb_run_has_zero_backward_nfes(tmp_path):
    _, rows = train(tiny_run(tmp_path, "backward=jfb"))
    assert rows and all(r.bwd_nfes == 0 and r.bwd_residual == 0.0 for r in rows)
    col = METRICS_COLUMNS.index("bwd_nfes")
    assert {r[col] for r in read_metrics(tmp_path / "metrics.csv")[1:]} == {"0"}


def test_contractive_model_converges_every_forward_solve(tmp_path):
    run = tiny_run(tmp_path, "data.n_samples=96")
    lip = replace(run.model.lip, a=calibrate_slope(0.8, run.model.lip))
    run = replace(run, model=replace(run.model, lip=lip))
    _, rows = train(run)
    assert rows and all(r.fwd_nfes <= 18 and r.fwd_residual <= 1e-3 for r in rows)


def test_divergent_steps_are_skipped_then_abort(tmp_path, monkeypatch):
    real = train_mod.train_step
    calls = []

    def flaky(params, opt, x, y, run, rng, epoch, step):
        calls.append(step)
        if step == 2:
            raise DivergenceError(3, "synthetic blow-up")
        return real(params, opt, x, y, run, rng, epoch, step)

    monkeypatch.setattr(train_mod, "train_step", flaky)
    _, rows = train(tiny_run(tmp_path / "skip"))
    assert [r.step for r in rows] == [1, 3]

    def broken(*args):
        raise DivergenceError(1, "always")

    monkeypatch.setattr(train_mod, "train_step", broken)
    with pytest.raises(TrainingAborted, match="3/3"):
        train(tiny_run(tmp_path / "abort"))


def test_evaluate_is_deterministic_and_at_chance(tmp_path):
    run = parse_config(TINY, ["model.height=16", "model.width=16"])
    params = build_model(run.model)
    ds = synthetic_dataset(300, 3, 16, 16, seed=5, dtype=run.model.dtype)
    a = evaluate(params, ds, run.solver_fwd)
    b = evaluate(params, ds, run.solver_fwd)
    assert a == b
    assert abs(a.accuracy - 1 / 3) <= 0.10
    assert a.converged_fraction == 1.0 and a.mean_nfes <= run.solver_fwd.max_iter
