"""Training and evaluation loops."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import astuple, dataclass, fields

import numpy as np

from ..equilibrium import implicit_backward, jfb_backward, solve_forward
from ..model import ModelParams, build_model, certified_bound, classify, classify_vjp, cross_entropy, project_all
from ..solvers import DivergenceError, SolverConfig
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import Dataset, load_dataset

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class MetricsRow:
    epoch: int
    step: int
    loss: float
    accuracy: float
    fwd_nfes: int
    bwd_nfes: int
    fwd_residual: float
    bwd_residual: float
    budget_L: float
    wall_ms: float


METRICS_COLUMNS = tuple(f.name for f in fields(MetricsRow))


def _fmt(v):
    return str(v) if isinstance(v, (int, np.integer)) else f"{v:.6g}"


class MetricsWriter:
    """Append-only ``metrics.csv`` with a header row and ``%.6g`` floats."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(METRICS_COLUMNS)

    def write(self, row: MetricsRow):
        self._w.writerow([_fmt(v) for v in astuple(row)])
        self._fh.flush()

    def close(self):
        self._fh.close()


class Adam:
    """Adam updating a parameter dict in place."""

    def __init__(self, tensors: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.t = 0

    def step(self, tensors: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            p = tensors[k]
            g = np.asarray(g, dtype=p.dtype)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p -= upd.astype(p.dtype)


def train_step(params: ModelParams, opt: Adam, x, y, run: RunConfig, rng, epoch: int, step: int):
    """One optimisation step.  Returns a MetricsRow; raises DivergenceError on a non-finite solve."""
    start = time.perf_counter()
    res = solve_forward(params, x, run.solver_fwd, mode="train", rng=rng, batch_id=step)
    if not res.forward_report.converged:
        log.info("epoch %d step %d: forward solve unconverged (residual %.3g)",
                 epoch, step, res.forward_report.final_residual)
    logits = classify(params, res.z_star)
    loss, dlogits = cross_entropy(logits, y)
    acc = float(np.mean(logits.argmax(axis=1) == y))
    dz, grads = classify_vjp(params, res.z_star, dlogits)
    if run.backward == "jfb":
        gr = jfb_backward(params, res, dz)
    else:
        gr = implicit_backward(params, res, dz, run.solver_bwd)
    grads.update(gr.param_grads)
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise DivergenceError(0, f"non-finite gradient for {bad[0]}")
    opt.step(params.tensors, grads)
    project_all(params, iters=1)
    bwd = gr.backward_report
    return MetricsRow(epoch, step, loss, acc, res.forward_report.nfes, bwd.nfes if bwd else 0,
                      res.forward_report.final_residual, bwd.final_residual if bwd else 0.0,
                      certified_bound(params).L, 1000.0 * (time.perf_counter() - start))


def train(run: RunConfig, dataset: Dataset | None = None, params: ModelParams | None = None,
          out_dir: str | None = None):
    """Run the configured number of epochs; returns ``(params, rows)``.

    Writes ``metrics.csv`` and one checkpoint per epoch under ``out_dir``
    (``run.out_dir`` by default).  Divergent steps are logged and skipped; an
    epoch where more than half the steps diverge aborts the run.
    """
    out_dir = out_dir or run.out_dir
    os.makedirs(out_dir, exist_ok=True)
    params = params if params is not None else build_model(run.model)
    dataset = dataset if dataset is not None else load_dataset(run.data, run.model, run.seed)
    opt = Adam(params.tensors, run.lr, run.betas, run.adam_eps)
    rng = np.random.default_rng(run.seed)
    rows = []
    writer = MetricsWriter(os.path.join(out_dir, "metrics.csv"))
    try:
        step = 0
        for epoch in range(1, run.epochs + 1):
            diverged = total = 0
            for x, y in dataset.batches(run.batch_size, seed=run.seed, epoch=epoch):
                step += 1
                total += 1
                try:
                    row = train_step(params, opt, x, y, run, rng, epoch, step)
                except DivergenceError as exc:
                    diverged += 1
                    log.warning("epoch %d step %d skipped: %s", epoch, step, exc)
                    continue
                rows.append(row)
                writer.write(row)
            if total and diverged > total / 2:
                raise TrainingAborted(f"epoch {epoch}: {diverged}/{total} steps diverged")
            save_checkpoint(params, os.path.join(out_dir, f"epoch{epoch:03d}"))
            save_checkpoint(params, os.path.join(out_dir, "last"))
    finally:
        writer.close()
    return params, rows


@dataclass
class EvalResult:
    accuracy: float
    mean_nfes: float
    mean_residual: float
    converged_fraction: float


def evaluate(params: ModelParams, dataset: Dataset, solver: SolverConfig, batch_size: int = 64) -> EvalResult:
    """Eval-mode accuracy and forward-solve statistics (dropout off)."""
    correct, nfes, resid, conv, batches = 0, [], [], 0, 0
    for x, y in dataset.batches(batch_size):
        res = solve_forward(params, x, solver, mode="eval")
        logits = classify(params, res.z_star)
        correct += int(np.sum(logits.argmax(axis=1) == y))
        rep = res.forward_report
        nfes.append(rep.nfes)
        resid.append(rep.final_residual)
        conv += rep.converged
        batches += 1
    n = len(dataset)
    return EvalResult(correct / n if n else math.nan, float(np.mean(nfes)), float(np.mean(resid)),
                      conv / batches if batches else math.nan)
