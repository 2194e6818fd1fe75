"""Direct 2-D convolution kernels.

Two interchangeable implementations live here: explicit loops compiled with
numba, and a vectorised numpy path built on ``sliding_window_view``.  The
loops are used when numba imports cleanly and ``LDEQ_NUMBA`` is not set to
``0``; everything else in the package goes through :func:`conv2d`,
:func:`conv2d_input_grad` and :func:`conv2d_weight_grad`.

All kernels take ``x`` as ``(B, Ci, H, W)`` and ``w`` as ``(Co, Ci, kh, kw)``
with symmetric zero padding and no bias.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


# --------------------------------------------------------------------------
# numpy path


def _windows(x, kh, kw, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_numpy(x, w, stride=1, pad=0):
    kh, kw = w.shape[2:]
    win = _windows(x, kh, kw, stride, pad)
    return np.einsum("bchwij,ocij->bohw", win, w, optimize=True)


def conv2d_input_grad_numpy(g, w, in_shape, stride=1, pad=0):
    B, Ci, H, W = in_shape
    kh, kw = w.shape[2:]
    Ho, Wo = g.shape[2:]
    gp = np.zeros((B, Ci, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
    for ky in range(kh):
        for kx in range(kw):
            contrib = np.einsum("bohw,oc->bchw", g, w[:, :, ky, kx], optimize=True)
            gp[:, :, ky:ky + stride * (Ho - 1) + 1:stride,
               kx:kx + stride * (Wo - 1) + 1:stride] += contrib
    return gp[:, :, pad:pad + H, pad:pad + W]


def conv2d_weight_grad_numpy(x, g, kshape, stride=1, pad=0):
    kh, kw = kshape
    win = _windows(x, kh, kw, stride, pad)
    return np.einsum("bchwij,bohw->ocij", win, g, optimize=True)


# --------------------------------------------------------------------------
# numba path

if numba is not None:

    @numba.njit(cache=True)
    def _conv2d_nb(x, w, stride, pad):
        B, Ci, H, W = x.shape
        Co, _, kh, kw = w.shape
        Ho = (H + 2 * pad - kh) // stride + 1
        Wo = (W + 2 * pad - kw) // stride + 1
        out = np.zeros((B, Co, Ho, Wo), dtype=x.dtype)
        for b in range(B):
            for co in range(Co):
                for ci in range(Ci):
                    for ky in range(kh):
                        for kx in range(kw):
                            wv = w[co, ci, ky, kx]
                            for oy in range(Ho):
                                iy = oy * stride + ky - pad
                                if iy < 0 or iy >= H:
                                    continue
                                for ox in range(Wo):
                                    ix = ox * stride + kx - pad
                                    if ix < 0 or ix >= W:
                                        continue
                                    out[b, co, oy, ox] += wv * x[b, ci, iy, ix]
        return out

    @numba.njit(cache=True)
    def _conv2d_input_grad_nb(g, w, B, H, W, stride, pad):
        Co, Ci, kh, kw = w.shape
        Ho, Wo = g.shape[2], g.shape[3]
        gx = np.zeros((B, Ci, H, W), dtype=g.dtype)
        for b in range(B):
            for co in range(Co):
                for ci in range(Ci):
                    for ky in range(kh):
                        for kx in range(kw):
                            wv = w[co, ci, ky, kx]
                            for oy in range(Ho):
                                iy = oy * stride + ky - pad
                                if iy < 0 or iy >= H:
                                    continue
                                for ox in range(Wo):
                                    ix = ox * stride + kx - pad
                                    if ix < 0 or ix >= W:
                                        continue
                                    gx[b, ci, iy, ix] += wv * g[b, co, oy, ox]
        return gx

    @numba.njit(cache=True)
    def _conv2d_weight_grad_nb(x, g, kh, kw, stride, pad):
        B, Ci, H, W = x.shape
        Co, Ho, Wo = g.shape[1], g.shape[2], g.shape[3]
        gw = np.zeros((Co, Ci, kh, kw), dtype=x.dtype)
        zero = gw.dtype.type(0)  # accumulate in the input precision
        for b in range(B):
            for co in range(Co):
                for ci in range(Ci):
                    for ky in range(kh):
                        for kx in range(kw):
                            acc = zero
                            for oy in range(Ho):
                                iy = oy * stride + ky - pad
                                if iy < 0 or iy >= H:
                                    continue
                                for ox in range(Wo):
                                    ix = ox * stride + kx - pad
                                    if ix < 0 or ix >= W:
                                        continue
                                    acc += x[b, ci, iy, ix] * g[b, co, oy, ox]
                            gw[co, ci, ky, kx] += acc
        return gw


def conv2d_numba(x, w, stride=1, pad=0):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    return _conv2d_nb(x, w, stride, pad)


def conv2d_input_grad_numba(g, w, in_shape, stride=1, pad=0):
    g = np.ascontiguousarray(g)
    w = np.ascontiguousarray(w, dtype=g.dtype)
    B, _, H, W = in_shape
    return _conv2d_input_grad_nb(g, w, B, H, W, stride, pad)


def conv2d_weight_grad_numba(x, g, kshape, stride=1, pad=0):
    x = np.ascontiguousarray(x)
    g = np.ascontiguousarray(g, dtype=x.dtype)
    return _conv2d_weight_grad_nb(x, g, kshape[0], kshape[1], stride, pad)


# --------------------------------------------------------------------------
# dispatch

def numba_enabled() -> bool:
    if numba is None:
        return False
    return os.environ.get("LDEQ_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


BACKEND = "numba" if numba_enabled() else "numpy"

if BACKEND == "numba":
    conv2d = conv2d_numba
    conv2d_input_grad = conv2d_input_grad_numba
    conv2d_weight_grad = conv2d_weight_grad_numba
else:
    conv2d = conv2d_numpy
    conv2d_input_grad = conv2d_input_grad_numpy
    conv2d_weight_grad = conv2d_weight_grad_numpy
