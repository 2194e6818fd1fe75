"""Closed-form Lipschitz budget of the multiscale equilibrium map.

The map is ``post-fusion o fusion o residual-block``.  Each block bound is a
product/sum of the per-operation constants:

* residual block: ``(1-a1) g a + a1 g^3 c^2 a^2 / (1-p)``
* post-fusion:    ``g c a``
* fusion, branch i: ``sqrt((1-a2)^2 + a2^2 sum_j (w_ij L_ij)^2)``

where ``g`` is the affine ceiling, ``c`` the convolution target norm, ``a``
the activation slope and ``L_ij`` the bound of the down/upsample path from
branch ``j`` to branch ``i``.  The network bound is
``L = H * sqrt(sum_i Ltilde_i^2) * Lbar``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .lipops import fusion_weights

log = logging.getLogger(__name__)

SWEEP_PARAMS = ("alpha1", "alpha2", "c", "gamma_bar", "a", "p", "n")
SWEEP_COLUMNS = ("param", "value", "L_hat", "L_bar", "L_tilde_rms", "L")


@dataclass(frozen=True)
class LipschitzConfig:
    alpha1: float = 0.5
    alpha2: float = 0.3
    c: float = 2.0
    gamma_bar: float = 1.0
    a: float = 0.4
    p: float = 0.3
    n: int = 4
    upsample_includes_conv: bool = True

    def __post_init__(self):
        for name in ("alpha1", "alpha2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not 0.0 < self.a <= 1.0:
            raise ValueError(f"slope a must lie in (0, 1], got {self.a}")
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout rate p must lie in [0, 1), got {self.p}")
        if not self.c > 0:
            raise ValueError(f"target norm c must be positive, got {self.c}")
        if not self.gamma_bar > 0:
            raise ValueError(f"gamma_bar must be positive, got {self.gamma_bar}")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"branch count n must be a positive integer, got {self.n}")
        object.__setattr__(self, "n", int(self.n))


# Calibration setting: only the slope varies between runs.
CALIBRATION = LipschitzConfig(alpha1=0.5, alpha2=0.3, c=2.0, gamma_bar=1.0, a=0.4, p=0.3, n=4)
# Base point for one-parameter sensitivity sweeps.
SENSITIVITY = LipschitzConfig(alpha1=0.5, alpha2=0.3, c=1.5, gamma_bar=1.0, a=0.4, p=0.3, n=4)


@dataclass(frozen=True)
class BudgetReport:
    L_hat: float
    L_bar: float
    L_tilde: tuple
    L: float
    paths: dict
    L_eval: float

    @property
    def L_tilde_rms(self) -> float:
        """``sqrt(sum_i Ltilde_i^2)``, the fusion block's contribution."""
        return math.sqrt(sum(t * t for t in self.L_tilde))

    def format(self) -> str:
        lines = [
            f"L_hat       = {self.L_hat:.6g}",
            f"L_bar       = {self.L_bar:.6g}",
            f"L_tilde     = [{', '.join(f'{t:.6g}' for t in self.L_tilde)}]",
            f"L_tilde_rms = {self.L_tilde_rms:.6g}",
            f"L           = {self.L:.6g}",
            f"L (eval)    = {self.L_eval:.6g}",
        ]
        if self.paths:
            lines.append("path bounds L_fuse[i,j]:")
            for (i, j), v in sorted(self.paths.items()):
                lines.append(f"  {i} <- {j}: {v:.6g}")
        return "\n".join(lines)


def compose(bounds, mode: str = "sequential") -> float:
    """Chain bounds: product for ``sequential`` maps, sum for ``additive`` ones."""
    bounds = [float(b) for b in bounds]
    if any(b < 0 for b in bounds):
        raise ValueError("Lipschitz bounds must be non-negative")
    if mode == "sequential":
        return math.prod(bounds)
    if mode == "additive":
        return math.fsum(bounds)
    raise ValueError(f"unknown composition mode {mode!r}")


def residual_block_bound(cfg: LipschitzConfig) -> float:
    g, c, a = cfg.gamma_bar, cfg.c, cfg.a
    drop = 1.0 / (1.0 - cfg.p)
    inner = compose([g, drop, c, a, g, c])
    return compose([a, g]) * compose([1.0 - cfg.alpha1, cfg.alpha1 * inner], "additive")


def post_fusion_bound(cfg: LipschitzConfig) -> float:
    return compose([cfg.gamma_bar, cfg.c, cfg.a])


def fuse_path_bound(cfg: LipschitzConfig, i: int, j: int) -> float:
    """Bound of the path carrying branch ``j`` into branch ``i`` (1-based)."""
    if i == j:
        raise ValueError("fusion paths need i != j")
    if not (1 <= i <= cfg.n and 1 <= j <= cfg.n):
        raise ValueError(f"branches ({i}, {j}) outside 1..{cfg.n}")
    g, c, a = cfg.gamma_bar, cfg.c, cfg.a
    if j < i:
        return g * c * (a * g * c) ** (i - j - 1)
    up = 2.0 ** (j - i)
    return up * g * c if cfg.upsample_includes_conv else up


def fusion_branch_bound(cfg: LipschitzConfig, i: int) -> float:
    row = fusion_weights(cfg.n, i)
    acc = math.fsum((w * fuse_path_bound(cfg, i, j)) ** 2 for w, j in zip(row.weights, row.partners))
    return math.sqrt((1.0 - cfg.alpha2) ** 2 + cfg.alpha2 ** 2 * acc)


def overall_bound(cfg: LipschitzConfig) -> BudgetReport:
    L_hat = residual_block_bound(cfg)
    L_bar = post_fusion_bound(cfg)
    tilde = tuple(fusion_branch_bound(cfg, i) for i in range(1, cfg.n + 1))
    rms = math.sqrt(math.fsum(t * t for t in tilde))
    paths = {(i, j): fuse_path_bound(cfg, i, j)
             for i in range(1, cfg.n + 1) for j in range(1, cfg.n + 1) if i != j}
    L_eval = residual_block_bound(replace(cfg, p=0.0)) * rms * L_bar
    return BudgetReport(L_hat, L_bar, tilde, L_hat * rms * L_bar, paths, L_eval)


def calibrate_slope(target: float, cfg: LipschitzConfig = CALIBRATION, tol: float = 1e-12) -> float:
    """Slope ``a`` at which ``overall_bound`` equals ``target`` (bisection; L is increasing in a)."""
    lo, hi = 1e-9, 1.0
    if overall_bound(replace(cfg, a=hi)).L < target:
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if overall_bound(replace(cfg, a=mid)).L < target:
            lo = mid
        else:
            hi = mid
    return lo


def sensitivity_sweep(cfg: LipschitzConfig, param: str, values) -> list[tuple]:
    """Evaluate the bound once per value of ``param``; out-of-domain values are skipped."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"cannot sweep {param!r}; choose from {SWEEP_PARAMS}")
    rows = []
    for v in values:
        try:
            r = overall_bound(replace(cfg, **{param: v}))
        except ValueError as exc:
            log.warning("skipping %s=%r: %s", param, v, exc)
            continue
        rows.append((param, float(v), r.L_hat, r.L_bar, r.L_tilde_rms, r.L))
    return rows


def sweep_csv(rows, fh=None) -> str:
    """Write sweep rows as CSV (``%.6g`` numbers); returns the text when ``fh`` is None."""
    out = fh if fh is not None else io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for row in rows:
        w.writerow([row[0]] + [f"{x:.6g}" for x in row[1:]])
    return out.getvalue() if fh is None else ""


def default_grid(param: str, cfg: LipschitzConfig) -> np.ndarray:
    if param in ("alpha1", "alpha2"):
        return np.linspace(0.05, 0.95, 19)
    if param == "a":
        return np.linspace(0.1, 1.0, 10)
    if param == "p":
        return np.linspace(0.0, 0.5, 11)
    if param == "n":
        return np.arange(1, 7)
    if param in ("c", "gamma_bar"):
        return np.linspace(0.5, 2.5, 9)
    raise ValueError(param)
