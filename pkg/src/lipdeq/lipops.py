"""Layer operations with forward, vector-Jacobian product and Lipschitz bound.

Every operation is described by an :class:`OpSpec`.  Feature maps use the
``(B, C, H, W)`` layout; the elementwise kinds accept any array whose first
axis is the batch.  ``ConvexCombine`` is the only two-input kind: its input
and cotangent-in are ``(x, y)`` pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .tensors import StructuralError, sample_norms

KINDS = ("GN", "MGN", "ReLU", "SReLU", "Dropout", "Conv", "ConvStar", "UpsampleNN", "ConvexCombine")
MODES = ("train", "eval")


@dataclass
class OpSpec:
    """One layer operation.

    ``hyper`` holds kind-specific scalars (``gamma``/``beta``/``eps``/``groups``
    for norms, ``a``, ``p`` and ``mask``, ``stride``/``padding``/``c``/``in_hw``
    for convolutions, ``s``/``t``, ``alpha``).  ``params`` maps roles (``W``,
    ``b``, ``gamma``, ``beta``) to arrays, and ``names`` maps the same roles to
    global parameter names so gradients can be routed back to a model.
    """

    kind: str
    hyper: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    names: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown op kind {self.kind!r}")
        h = self.hyper
        if self.kind == "SReLU" and not 0.0 < h.get("a", 1.0) <= 1.0:
            raise ValueError(f"SReLU slope must lie in (0, 1], got {h['a']}")
        if self.kind == "Dropout" and not 0.0 <= h.get("p", 0.0) < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {h['p']}")
        if self.kind == "ConvexCombine" and not 0.0 < h.get("alpha", 0.5) < 1.0:
            raise ValueError(f"convex weight must lie in (0, 1), got {h['alpha']}")
        if self.kind == "ConvStar" and not h.get("c", 1.0) > 0:
            raise ValueError(f"target norm must be positive, got {h['c']}")
        if self.kind == "GN" and not h.get("eps", 1e-5) > 0:
            raise ValueError(f"GN eps must be positive, got {h['eps']}")


@dataclass(frozen=True)
class ConvGeometry:
    stride: int = 1
    padding: int = 0
    in_hw: tuple = (1, 1)


@dataclass(frozen=True)
class FusionRow:
    """Softmax fusion weights of output branch ``i`` (1-based) over its partners."""

    i: int
    partners: tuple
    weights: np.ndarray
    penalties: np.ndarray


# --------------------------------------------------------------------------
# helpers


def _channel_shape(z, C):
    return (1, C) + (1,) * (z.ndim - 2)


def _affine(op, C, dtype):
    """Per-channel (gamma, beta) arrays broadcastable against a feature map."""
    gamma = op.params.get("gamma")
    beta = op.params.get("beta")
    if gamma is None:
        gamma = np.full(C, op.hyper.get("gamma", 1.0), dtype=dtype)
    if beta is None:
        beta = np.full(C, op.hyper.get("beta", 0.0), dtype=dtype)
    gamma, beta = np.asarray(gamma), np.asarray(beta)
    if gamma.shape != (C,) or beta.shape != (C,):
        raise StructuralError(f"affine parameters {gamma.shape}/{beta.shape} do not match {C} channels")
    return gamma, beta


def default_groups(C: int) -> int:
    return math.gcd(C, 8)


def _grouped(z, op):
    if z.ndim < 2:
        raise StructuralError(f"normalization needs (B, C, ...) input, got shape {z.shape}")
    B, C = z.shape[:2]
    g = op.hyper.get("groups") or default_groups(C)
    if C % g:
        raise StructuralError(f"{C} channels cannot be split into {g} groups")
    return z.reshape((B, g, C // g) + z.shape[2:]), B, C, g


def _group_axes(zg):
    return tuple(range(2, zg.ndim))


def _conv_geom(op):
    return int(op.hyper.get("stride", 1)), int(op.hyper.get("padding", 0))


def _check_conv(op, z):
    W = op.params["W"]
    if z.ndim != 4 or z.shape[1] != W.shape[1]:
        raise StructuralError(f"conv expects (B, {W.shape[1]}, H, W) input, got {z.shape}")
    return W


def _mask(op, z):
    mask = op.hyper.get("mask")
    if mask is None:
        raise StructuralError("dropout in train mode needs a frozen mask for the current solve")
    mask = np.asarray(mask)
    try:
        np.broadcast_shapes(mask.shape, z.shape)
    except ValueError:
        raise StructuralError(f"dropout mask {mask.shape} does not broadcast to {z.shape}") from None
    return mask


def _pair(z):
    if not (isinstance(z, (tuple, list)) and len(z) == 2):
        raise StructuralError("ConvexCombine takes an (x, y) pair")
    x, y = np.asarray(z[0]), np.asarray(z[1])
    if x.shape != y.shape:
        raise StructuralError(f"ConvexCombine operands differ in shape: {x.shape} vs {y.shape}")
    return x, y


# --------------------------------------------------------------------------
# forward


def apply(op: OpSpec, z, mode: str = "train"):
    """Evaluate ``op`` at ``z``."""
    k, h = op.kind, op.hyper
    if k == "ConvexCombine":
        x, y = _pair(z)
        alpha = float(h.get("alpha", 0.5))
        return (1.0 - alpha) * x + alpha * y
    z = np.asarray(z)
    if k == "MGN":
        zg, B, C, g = _grouped(z, op)
        zc = (zg - zg.mean(axis=_group_axes(zg), keepdims=True)).reshape(z.shape)
        gamma, beta = _affine(op, C, z.dtype)
        return zc * gamma.reshape(_channel_shape(z, C)) + beta.reshape(_channel_shape(z, C))
    if k == "GN":
        zg, B, C, g = _grouped(z, op)
        axes = _group_axes(zg)
        zc = zg - zg.mean(axis=axes, keepdims=True)
        var = (zc * zc).mean(axis=axes, keepdims=True)
        xhat = (zc / np.sqrt(var + float(h.get("eps", 1e-5)))).reshape(z.shape)
        gamma, beta = _affine(op, C, z.dtype)
        return xhat * gamma.reshape(_channel_shape(z, C)) + beta.reshape(_channel_shape(z, C))
    if k == "ReLU":
        return np.maximum(z, 0)
    if k == "SReLU":
        return np.maximum(float(h.get("a", 1.0)) * z, 0)
    if k == "Dropout":
        if mode == "eval":
            return z
        p = float(h.get("p", 0.0))
        return z * _mask(op, z) * (1.0 / (1.0 - p))
    if k in ("Conv", "ConvStar"):
        W = _check_conv(op, z)
        stride, pad = _conv_geom(op)
        out = _kernels.conv2d(z, W.astype(z.dtype, copy=False), stride, pad)
        b = op.params.get("b")
        if b is not None:
            out += b.astype(z.dtype, copy=False).reshape(1, -1, 1, 1)
        return out
    if k == "UpsampleNN":
        s, t = int(h.get("s", 2)), int(h.get("t", 2))
        return np.repeat(np.repeat(z, s, axis=-2), t, axis=-1)
    raise AssertionError(k)


# --------------------------------------------------------------------------
# vector-Jacobian products


def vjp(op: OpSpec, z, v, mode: str = "train", need_params: bool = True):
    """Return ``(J^T v, param_grads)`` for ``op`` linearised at ``z``.

    ``param_grads`` is keyed by role (``W``, ``b``, ``gamma``, ``beta``) and
    only carries roles present in ``op.params``.
    """
    k, h = op.kind, op.hyper
    grads = {}
    if k == "ConvexCombine":
        x, y = _pair(z)
        alpha = float(h.get("alpha", 0.5))
        v = np.asarray(v)
        return ((1.0 - alpha) * v, alpha * v), grads
    z, v = np.asarray(z), np.asarray(v)
    if k not in ("UpsampleNN", "Conv", "ConvStar") and v.shape != z.shape:
        raise StructuralError(f"cotangent {v.shape} does not match linearisation point {z.shape}")
    if k == "MGN":
        zg, B, C, g = _grouped(z, op)
        gamma, _ = _affine(op, C, z.dtype)
        cs = _channel_shape(z, C)
        gz = (v * gamma.reshape(cs)).reshape(zg.shape)
        v_in = (gz - gz.mean(axis=_group_axes(zg), keepdims=True)).reshape(z.shape)
        if need_params:
            red = (0,) + tuple(range(2, z.ndim))
            if "gamma" in op.params:
                zc = (zg - zg.mean(axis=_group_axes(zg), keepdims=True)).reshape(z.shape)
                grads["gamma"] = (v * zc).sum(axis=red)
            if "beta" in op.params:
                grads["beta"] = v.sum(axis=red)
        return v_in, grads
    if k == "GN":
        zg, B, C, g = _grouped(z, op)
        axes = _group_axes(zg)
        zc = zg - zg.mean(axis=axes, keepdims=True)
        var = (zc * zc).mean(axis=axes, keepdims=True)
        std = np.sqrt(var + float(h.get("eps", 1e-5)))
        xhat = zc / std
        gamma, _ = _affine(op, C, z.dtype)
        cs = _channel_shape(z, C)
        gx = (v * gamma.reshape(cs)).reshape(zg.shape)
        v_in = (gx - gx.mean(axis=axes, keepdims=True)
                - xhat * (gx * xhat).mean(axis=axes, keepdims=True)) / std
        if need_params:
            red = (0,) + tuple(range(2, z.ndim))
            if "gamma" in op.params:
                grads["gamma"] = (v * xhat.reshape(z.shape)).sum(axis=red)
            if "beta" in op.params:
                grads["beta"] = v.sum(axis=red)
        return v_in.reshape(z.shape), grads
    if k == "ReLU":
        return v * (z > 0), grads
    if k == "SReLU":
        a = float(h.get("a", 1.0))
        return v * (a * (z > 0)).astype(v.dtype, copy=False), grads
    if k == "Dropout":
        if mode == "eval":
            return v, grads
        p = float(h.get("p", 0.0))
        return v * _mask(op, z) * (1.0 / (1.0 - p)), grads
    if k in ("Conv", "ConvStar"):
        W = _check_conv(op, z)
        stride, pad = _conv_geom(op)
        Wz = W.astype(z.dtype, copy=False)
        Ho = _kernels.out_size(z.shape[2], W.shape[2], stride, pad)
        Wo = _kernels.out_size(z.shape[3], W.shape[3], stride, pad)
        if v.shape != (z.shape[0], W.shape[0], Ho, Wo):
            raise StructuralError(f"conv cotangent {v.shape} does not match output shape")
        v_in = _kernels.conv2d_input_grad(v, Wz, z.shape, stride, pad)
        if need_params:
            if "W" in op.params:
                grads["W"] = _kernels.conv2d_weight_grad(z, v, W.shape[2:], stride, pad).astype(W.dtype, copy=False)
            if "b" in op.params:
                grads["b"] = v.sum(axis=(0, 2, 3))
        return v_in, grads
    if k == "UpsampleNN":
        s, t = int(h.get("s", 2)), int(h.get("t", 2))
        want = z.shape[:-2] + (z.shape[-2] * s, z.shape[-1] * t)
        if v.shape != want:
            raise StructuralError(f"upsample cotangent {v.shape} does not match {want}")
        lead = z.shape[:-2]
        vr = v.reshape(lead + (z.shape[-2], s, z.shape[-1], t))
        return vr.sum(axis=(-3, -1)), grads
    raise AssertionError(k)


# --------------------------------------------------------------------------
# Lipschitz bounds


def lipschitz_bound(op: OpSpec) -> float:
    """Analytic Lipschitz constant of ``op`` under the Euclidean norm.

    ConvStar reports its enforced ceiling ``c``; Conv reports a power-iteration
    estimate of its operator norm (``hyper['in_hw']`` fixes the geometry).
    ``ConvexCombine`` is bounded as the map ``(x, y) -> (1-a)x + a y`` on the
    concatenated pair.
    """
    k, h = op.kind, op.hyper
    if k in ("MGN", "GN"):
        gamma = op.params.get("gamma")
        gmax = float(np.max(np.abs(gamma))) if gamma is not None else abs(float(h.get("gamma", 1.0)))
        return gmax if k == "MGN" else gmax / math.sqrt(float(h.get("eps", 1e-5)))
    if k == "ReLU":
        return 1.0
    if k == "SReLU":
        return float(h.get("a", 1.0))
    if k == "Dropout":
        return 1.0 / (1.0 - float(h.get("p", 0.0)))
    if k == "ConvStar":
        return float(h["c"])
    if k == "Conv":
        stride, pad = _conv_geom(op)
        geom = ConvGeometry(stride, pad, tuple(h.get("in_hw", (8, 8))))
        return spectral_norm(op.params["W"], geom, int(h.get("iters", 50)), h.get("u_state"))
    if k == "UpsampleNN":
        return math.sqrt(int(h.get("s", 2)) * int(h.get("t", 2)))
    if k == "ConvexCombine":
        alpha = float(h.get("alpha", 0.5))
        return math.hypot(1.0 - alpha, alpha)
    raise AssertionError(k)


PROBES = 4


def init_u_state(W, geometry: ConvGeometry, seed: int = 0) -> np.ndarray:
    """Orthonormal block of power-iteration probes, shape ``(k, Ci, H, W)``."""
    H, Wd = geometry.in_hw
    shape = (W.shape[1], H, Wd)
    k = min(PROBES, int(np.prod(shape)))
    u = np.random.default_rng(seed).standard_normal((k,) + shape)
    return _orthonormal(u)


def _orthonormal(U):
    k = U.shape[0]
    Q, _ = np.linalg.qr(U.reshape(k, -1).T)
    return np.ascontiguousarray(Q.T).reshape(U.shape)


def spectral_norm(W, geometry: ConvGeometry, iters: int = 50, u_state=None) -> float:
    """Power-iteration estimate of the operator norm of the padded convolution.

    A small block of probes is pushed through the convolution and its
    transpose and re-orthonormalised each round (subspace iteration); the
    estimate is the top Rayleigh-Ritz value of the final block, which keeps
    nearly degenerate leading singular values from stalling convergence.
    ``u_state`` (shape ``(k, Ci, H, W)``) is read as a warm start and
    overwritten with the final block.  Runs in 64-bit regardless of ``W``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    W = np.asarray(W, dtype=np.float64)
    if not np.any(W):
        return 0.0
    stride, pad = geometry.stride, geometry.padding
    u = init_u_state(W, geometry) if u_state is None else np.array(u_state, dtype=np.float64)
    if not np.all(np.isfinite(u)) or not np.any(u):
        u = init_u_state(W, geometry)
    u = _orthonormal(u)
    shape = u.shape
    for _ in range(iters):
        v = _kernels.conv2d(u, W, stride, pad)
        if not np.any(v):
            u = init_u_state(W, geometry, seed=1)
            continue
        u = _orthonormal(_kernels.conv2d_input_grad(v, W, shape, stride, pad))
    Au = _kernels.conv2d(u, W, stride, pad).reshape(shape[0], -1)
    sigma = float(np.linalg.svd(Au, compute_uv=False)[0])
    if u_state is not None:
        u_state[...] = u
    return sigma


def project_weights(W, c: float, geometry: ConvGeometry, u_state=None, iters: int = 1):
    """Rescale ``W`` onto the ball ``||W||_2 <= c`` using the power-iteration estimate."""
    if not c > 0:
        raise ValueError(f"target norm must be positive, got {c}")
    sigma = spectral_norm(W, geometry, iters, u_state)
    if sigma > c:
        return W * W.dtype.type(c / sigma)
    return W


def clamp_affine(gamma, gamma_bar: float):
    if not gamma_bar > 0:
        raise ValueError(f"gamma_bar must be positive, got {gamma_bar}")
    return np.clip(gamma, -gamma_bar, gamma_bar)


def fusion_weights(n: int, i: int) -> FusionRow:
    """Softmax weights ``w_ij = exp(-p_ij) / sum_k exp(-p_ik)`` for output branch ``i``.

    Penalty ``p_ij`` is the level difference ``j - i`` for coarser partners
    (upsample paths) and 0 for finer ones.  Branch indices are 1-based.
    """
    if not 1 <= i <= n:
        raise ValueError(f"branch index {i} outside 1..{n}")
    partners = tuple(j for j in range(1, n + 1) if j != i)
    if not partners:
        return FusionRow(i, (), np.zeros(0), np.zeros(0))
    pen = np.array([float(j - i) if j > i else 0.0 for j in partners])
    e = np.exp(-pen)
    return FusionRow(i, partners, e / e.sum(), pen)


# --------------------------------------------------------------------------
# empirical checks


def empirical_ratios(op: OpSpec, x, y, mode: str = "train") -> np.ndarray:
    """Per-sample ``||op(x) - op(y)|| / ||x - y||`` for batched inputs."""
    fx, fy = apply(op, x, mode), apply(op, y, mode)
    if op.kind == "ConvexCombine":
        dx = np.sqrt(sample_norms(x[0] - y[0]) ** 2 + sample_norms(x[1] - y[1]) ** 2)
    else:
        dx = sample_norms(np.asarray(x) - np.asarray(y))
    return sample_norms(fx - fy) / dx
