"""Fixed-point solvers: plain Banach iteration and type-II Anderson acceleration.

Solvers act on numpy arrays whose axis 0 is the batch (a 1-D array is one
sample).  The convergence metric is computed per sample and averaged over
the batch; the per-sample maximum is kept alongside for auditing.

Iteration counting: every evaluation of ``f`` is one NFE and appends one
entry to the residual trace.  Evaluation ``t`` measures ``f(z_t)`` against
``z_t``; when that residual drops to ``tol`` the solver returns ``f(z_t)``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .tensors import sample_norms

KINDS = ("banach", "anderson")
METRICS = ("relative", "absolute")


class DivergenceError(FloatingPointError):
    """An iterate became non-finite."""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"non-finite iterate at iteration {iteration}")


@dataclass(frozen=True)
class SolverConfig:
    kind: str = "anderson"
    tol: float = 1e-3
    metric: str = "relative"
    max_iter: int = 18
    memory: int = 5
    lam: float = 1e-4
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"solver kind must be one of {KINDS}, got {self.kind!r}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.memory < 1:
            raise ValueError(f"memory must be >= 1, got {self.memory}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")


@dataclass
class SolverReport:
    z_star: np.ndarray
    nfes: int
    residual_trace: list
    converged: bool
    elapsed: float
    max_trace: list = field(default_factory=list)
    metric: str = "relative"

    @property
    def final_residual(self) -> float:
        return self.residual_trace[-1] if self.residual_trace else float("nan")


def _residuals(fz, z, metric):
    diff = sample_norms(fz - z)
    if metric == "absolute":
        return diff
    return diff / np.maximum(sample_norms(fz), 1e-12)


def relative_residual(fz, z, metric: str = "relative", reduction: str = "mean"):
    """``||fz - z|| / max(||fz||, 1e-12)`` per sample (``absolute`` drops the denominator)."""
    fz, z = np.asarray(fz), np.asarray(z)
    if fz.shape != z.shape:
        raise ValueError(f"shape mismatch {fz.shape} vs {z.shape}")
    if fz.ndim < 2:
        fz, z = fz.reshape(1, -1), z.reshape(1, -1)
    r = _residuals(fz, z, metric)
    if reduction == "none":
        return r
    return float(r.max() if reduction == "max" else r.mean())


def _evaluate(f, z, t):
    fz = np.asarray(f(z))
    if fz.shape != z.shape:
        raise ValueError(f"map changed shape {z.shape} -> {fz.shape}")
    if not np.all(np.isfinite(fz)):
        raise DivergenceError(t)
    return fz


def banach_solve(f, z0, cfg: SolverConfig) -> SolverReport:
    """Iterate ``z <- f(z)`` until the residual reaches ``cfg.tol``."""
    start = time.perf_counter()
    z = np.array(z0, copy=True)
    batched = z.ndim >= 2
    trace, maxes = [], []
    fz, converged = z, False
    for t in range(1, cfg.max_iter + 1):
        fz = _evaluate(f, z, t)
        r = _residuals(fz, z, cfg.metric) if batched else _residuals(fz.reshape(1, -1), z.reshape(1, -1), cfg.metric)
        trace.append(float(r.mean()))
        maxes.append(float(r.max()))
        if trace[-1] <= cfg.tol:
            converged = True
            break
        z = fz
    return SolverReport(fz, len(trace), trace, converged, time.perf_counter() - start, maxes, cfg.metric)


def anderson_solve(f, z0, cfg: SolverConfig) -> SolverReport:
    """Type-II Anderson acceleration with memory ``m``, ridge ``lam`` and damping ``beta``.

    The mixing coefficients ``alpha`` minimise ``||sum_k alpha_k g_k||^2 +
    lam * s * ||alpha||^2`` subject to ``sum_k alpha_k = 1``, where
    ``g_k = f(z_k) - z_k`` and ``s`` is the mean squared residual of the
    window, so the ridge stays proportionate as residuals shrink.  The first
    update is a plain Banach step.
    """
    start = time.perf_counter()
    z0 = np.asarray(z0)
    shape = z0.shape
    batched = z0.ndim >= 2
    B = shape[0] if batched else 1
    D = int(np.prod(shape)) // B
    m = cfg.memory
    X = np.zeros((B, m, D), dtype=np.float64)
    F = np.zeros((B, m, D), dtype=np.float64)

    def call(flat, t):
        return _evaluate(f, flat.reshape(shape).astype(z0.dtype, copy=False), t).reshape(B, D)

    trace, maxes = [], []
    converged = False
    x = z0.reshape(B, D).astype(np.float64)
    fx = None
    for t in range(1, cfg.max_iter + 1):
        fx = call(x, t).astype(np.float64)
        slot = (t - 1) % m
        X[:, slot], F[:, slot] = x, fx
        r = _residuals(fx, x, cfg.metric)
        trace.append(float(r.mean()))
        maxes.append(float(r.max()))
        if trace[-1] <= cfg.tol:
            converged = True
            break
        k = min(t, m)
        if k == 1:
            x = fx
            continue
        G = F[:, :k] - X[:, :k]
        H = np.einsum("bid,bjd->bij", G, G)
        scale = np.einsum("bii->b", H) / k
        H = H + (cfg.lam * np.maximum(scale, 1e-300))[:, None, None] * np.eye(k)
        # bordered system [[0, 1^T], [1, H]] [mu; alpha] = [1; 0]
        A = np.zeros((B, k + 1, k + 1))
        A[:, 0, 1:] = 1.0
        A[:, 1:, 0] = 1.0
        A[:, 1:, 1:] = H
        rhs = np.zeros((B, k + 1))
        rhs[:, 0] = 1.0
        try:
            alpha = np.linalg.solve(A, rhs[..., None])[:, 1:, 0]
        except np.linalg.LinAlgError:
            # only reachable with lam == 0 and a degenerate window
            alpha = np.stack([np.linalg.lstsq(A[b], rhs[b], rcond=None)[0][1:] for b in range(B)])
        mixed_f = np.einsum("bk,bkd->bd", alpha, F[:, :k])
        if cfg.beta == 1.0:
            x = mixed_f
        else:
            x = cfg.beta * mixed_f + (1.0 - cfg.beta) * np.einsum("bk,bkd->bd", alpha, X[:, :k])
    z_star = fx.reshape(shape).astype(z0.dtype, copy=False)
    return SolverReport(z_star, len(trace), trace, converged, time.perf_counter() - start, maxes, cfg.metric)


def solve(f, z0, cfg: SolverConfig) -> SolverReport:
    return banach_solve(f, z0, cfg) if cfg.kind == "banach" else anderson_solve(f, z0, cfg)


TRACE_COLUMNS = ("solve_id", "iter", "metric", "value")


def write_trace_csv(reports, fh) -> None:
    """Write ``{solve_id: SolverReport}`` traces as ``solve_id,iter,metric,value`` rows."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for sid, rep in reports.items():
        for t, v in enumerate(rep.residual_trace, start=1):
            w.writerow([sid, t, rep.metric, f"{v:.6g}"])
