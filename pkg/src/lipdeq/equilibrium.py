"""Forward equilibrium solve and the two backward passes.

The implicit backward pass solves ``A = A J + dl/dz*`` as a second
fixed-point problem with the same solver machinery, then pushes ``A``
through the parameter VJP of ``f_theta`` at ``z*``.  JFB skips the solve and
uses ``dl/dz*`` directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model import FixedPointMap, ModelParams, certified_bound, draw_masks
from .solvers import DivergenceError, SolverConfig, SolverReport, solve
from .tensors import MultiscaleState

log = logging.getLogger(__name__)


class BackwardDivergence(DivergenceError):
    def __init__(self, iteration: int, certificate: float):
        self.certificate = certificate
        super().__init__(iteration, f"backward solve diverged at iteration {iteration} "
                                    f"(forward certificate L = {certificate:.4g})")


@dataclass
class EquilibriumResult:
    z_star: MultiscaleState
    forward_report: SolverReport
    frozen_masks: dict | None
    x: np.ndarray | None = None
    mode: str = "train"


@dataclass
class GradientResult:
    param_grads: dict
    backward_report: SolverReport | None
    A_vector: MultiscaleState


def solve_forward(params: ModelParams, x, solver: SolverConfig, mode: str = "train",
                  masks: dict | None = None, rng: np.random.Generator | None = None,
                  z0: MultiscaleState | None = None, batch_id=None) -> EquilibriumResult:
    """Find ``z* = f_theta(z*; x)`` starting from the zero state.

    In train mode a fresh dropout mask set is drawn (from ``rng``) unless
    ``masks`` is given; either way the masks stay fixed for the whole solve.
    """
    cfg = params.cfg
    x = np.asarray(x, dtype=cfg.np_dtype)
    B = x.shape[0]
    if mode == "train" and masks is None:
        masks = draw_masks(cfg, B, rng if rng is not None else np.random.default_rng(cfg.seed))
    fmap = FixedPointMap(params, x, mode, masks)
    shapes = cfg.branch_shapes(B)
    start = (z0 if z0 is not None else MultiscaleState.zeros(shapes, cfg.np_dtype)).flat()
    try:
        report = solve(fmap.flat_map(B), start, solver)
    except DivergenceError as exc:
        raise DivergenceError(exc.iteration, f"forward solve diverged at iteration {exc.iteration}"
                              + (f" (batch {batch_id})" if batch_id is not None else "")) from exc
    z_star = MultiscaleState.from_flat(report.z_star, shapes)
    return EquilibriumResult(z_star, report, masks, x, mode)


def _fmap(params, result):
    return FixedPointMap(params, result.x, result.mode, result.frozen_masks)


def _check_cotangent(result, loss_cotangent):
    if loss_cotangent.shapes != result.z_star.shapes:
        raise ValueError(f"cotangent shapes {loss_cotangent.shapes} != state shapes {result.z_star.shapes}")


def solve_adjoint(vjp, g: np.ndarray, solver: SolverConfig) -> SolverReport:
    """Fixed point of ``a -> vjp(a) + g`` from a zero start (``vjp`` is ``a -> J^T a``)."""
    g = np.asarray(g)
    return solve(lambda a: vjp(a) + g, np.zeros_like(g), solver)


def implicit_backward(params: ModelParams, result: EquilibriumResult, loss_cotangent: MultiscaleState,
                      solver: SolverConfig, allow_unconverged: bool = True) -> GradientResult:
    """Gradient via the implicit function theorem.

    Solves ``x = J^T x + dl/dz*`` (zero start) and returns the parameter VJP of
    ``f_theta`` at ``z*`` with cotangent ``A = x*``.
    """
    _check_cotangent(result, loss_cotangent)
    if not result.forward_report.converged:
        if not allow_unconverged:
            raise ValueError("forward solve did not converge")
        log.info("implicit backward at an unconverged forward iterate")
    lin = _fmap(params, result).linearize(result.z_star)
    try:
        report = solve_adjoint(lin.vjp_flat, loss_cotangent.flat(), solver)
    except DivergenceError as exc:
        raise BackwardDivergence(exc.iteration, certified_bound(params).L) from exc
    A = MultiscaleState.from_flat(report.z_star, lin.shapes)
    _, grads = lin.vjp(A, need_params=True)
    return GradientResult(grads, report, A)


def jfb_backward(params: ModelParams, result: EquilibriumResult, loss_cotangent: MultiscaleState) -> GradientResult:
    """Jacobian-free gradient: ``(I - J)^{-1}`` replaced by the identity."""
    _check_cotangent(result, loss_cotangent)
    lin = _fmap(params, result).linearize(result.z_star)
    _, grads = lin.vjp(loss_cotangent, need_params=True)
    return GradientResult(grads, None, loss_cotangent)


def power_jacobian_norm(f, vjp, z: np.ndarray, iters: int = 30, h: float = 1e-6,
                        rng: np.random.Generator | None = None) -> float:
    """Largest singular value of ``J_f(z)`` by power iteration on ``J^T J``.

    ``J u`` is a central finite difference of ``f``; ``J^T v`` comes from
    ``vjp``.  Works on arrays of any shape and runs in 64-bit.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    z = np.asarray(z, dtype=np.float64)
    u = rng.standard_normal(z.shape)
    u /= np.linalg.norm(u)
    sigma = 0.0
    step = h * max(1.0, float(np.linalg.norm(z)))
    for _ in range(iters):
        Ju = (np.asarray(f(z + step * u), dtype=np.float64) - np.asarray(f(z - step * u), dtype=np.float64)) / (2 * step)
        if not np.all(np.isfinite(Ju)):
            raise FloatingPointError("non-finite Jacobian probe")
        sigma = float(np.linalg.norm(Ju))
        if sigma == 0.0:
            return 0.0
        w = np.asarray(vjp(Ju / sigma), dtype=np.float64)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0
        u = w / nw
    Ju = (np.asarray(f(z + step * u), dtype=np.float64) - np.asarray(f(z - step * u), dtype=np.float64)) / (2 * step)
    return float(np.linalg.norm(Ju))


def estimate_jacobian_norm(params: ModelParams, z: MultiscaleState, x, iters: int = 30,
                           mode: str = "train", masks: dict | None = None, h: float = 1e-6) -> float:
    """``||J_f(z)||_2`` of the model at ``z`` (max over batch samples, since J is block diagonal)."""
    if params.cfg.dtype != "float64":
        raise ValueError("Jacobian norm estimation needs a float64 model")
    fmap = FixedPointMap(params, x, mode, masks)
    lin = fmap.linearize(z)
    f = fmap.flat_map(z.batch)
    return power_jacobian_norm(f, lin.vjp_flat, z.flat(), iters, h)
