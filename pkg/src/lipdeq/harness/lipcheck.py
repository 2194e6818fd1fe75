"""Empirical-versus-analytic Lipschitz ratios, per op and for a whole model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import lipops
from ..lipops import ConvGeometry, OpSpec
from ..model import ModelParams, certified_bound, draw_masks, empirical_ratios, random_state


@dataclass
class CheckRow:
    name: str
    pairs: int
    empirical: float
    bound: float

    @property
    def ratio(self) -> float:
        return self.empirical / self.bound if self.bound > 0 else 0.0

    def format(self) -> str:
        return f"{self.name:<14} {self.pairs:>6d} {self.empirical:>12.6g} {self.bound:>12.6g} {self.ratio:>8.4f}"


HEADER = f"{'op':<14} {'pairs':>6} {'empirical':>12} {'bound':>12} {'ratio':>8}"


def _pairs(rng, shape, pairs):
    """Half far-apart pairs, half close pairs (small perturbations probe the local slope)."""
    x = rng.standard_normal((pairs,) + shape)
    y = rng.standard_normal((pairs,) + shape)
    near = pairs // 2
    y[:near] = x[:near] + 1e-3 * rng.standard_normal((near,) + shape)
    return x, y


def sample_ops(rng: np.random.Generator, C: int = 4, hw: int = 8):
    """One representative OpSpec per kind, with random parameters."""
    gamma = rng.uniform(-1.5, 1.5, C)
    beta = rng.standard_normal(C)
    W = rng.standard_normal((C, C, 3, 3))
    geom = ConvGeometry(1, 1, (hw, hw))
    Wp = lipops.project_weights(W, 1.5, geom, iters=300)
    mask = (rng.random((1, C, 1, 1)) >= 0.3).astype(float)
    return {
        "MGN": OpSpec("MGN", {}, {"gamma": gamma, "beta": beta}),
        "GN": OpSpec("GN", {"eps": 1e-5}, {"gamma": gamma, "beta": beta}),
        "ReLU": OpSpec("ReLU"),
        "SReLU": OpSpec("SReLU", {"a": 0.4}),
        "Dropout": OpSpec("Dropout", {"p": 0.3, "mask": mask}),
        "Conv": OpSpec("Conv", {"stride": 2, "padding": 1, "in_hw": (hw, hw)},
                       {"W": W, "b": rng.standard_normal(C)}),
        "ConvStar": OpSpec("ConvStar", {"stride": 1, "padding": 1, "in_hw": (hw, hw), "c": 1.5},
                           {"W": Wp, "b": rng.standard_normal(C)}),
        "UpsampleNN": OpSpec("UpsampleNN", {"s": 2, "t": 2}),
        "ConvexCombine": OpSpec("ConvexCombine", {"alpha": 0.3}),
    }


def op_suite(pairs: int = 1000, seed: int = 0, C: int = 4, hw: int = 8) -> list[CheckRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for name, op in sample_ops(rng, C, hw).items():
        if name == "ConvexCombine":
            x0, y0 = _pairs(rng, (C, hw, hw), pairs)
            x1, y1 = _pairs(rng, (C, hw, hw), pairs)
            r = lipops.empirical_ratios(op, (x0, x1), (y0, y1))
        else:
            x, y = _pairs(rng, (C, hw, hw), pairs)
            r = lipops.empirical_ratios(op, x, y)
        rows.append(CheckRow(name, pairs, float(r.max()), lipops.lipschitz_bound(op)))
    return rows


def model_row(params: ModelParams, pairs: int = 1000, seed: int = 0, chunk: int = 100) -> CheckRow:
    """Whole-map ratio over random state pairs (train mode, frozen masks) against the certified L."""
    cfg = params.cfg
    rng = np.random.default_rng(seed)
    best, done = 0.0, 0
    while done < pairs:
        b = min(chunk, pairs - done)
        x = rng.uniform(0.0, 1.0, (b, cfg.in_channels, cfg.height, cfg.width)).astype(cfg.np_dtype)
        masks = draw_masks(cfg, b, rng)
        z1 = random_state(cfg, b, rng)
        z2 = random_state(cfg, b, rng, scale=float(rng.uniform(0.1, 2.0)))
        best = max(best, float(empirical_ratios(params, z1, z2, x, "train", masks).max()))
        done += b
    return CheckRow("model", pairs, best, certified_bound(params).L)


def format_table(rows) -> str:
    return "\n".join([HEADER] + [r.format() for r in rows])
