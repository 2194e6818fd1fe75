import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipdeq import _kernels as K

pytestmark = pytest.mark.skipif(K.numba is None, reason="numba not importable")


def naive_conv(x, w, stride, pad):
    B, Ci, H, W = x.shape
    Co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = K.out_size(H, kh, stride, pad), K.out_size(W, kw, stride, pad)
    out = np.zeros((B, Co, Ho, Wo))
    for b in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


geometry = st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3),
                     st.sampled_from([1, 3]), st.integers(1, 2), st.integers(4, 7))


@settings(max_examples=25, deadline=None)
@given(geometry, st.integers(0, 2**31 - 1))
def test_backends_agree_with_naive_loops(geom, seed):
    B, Ci, Co, k, stride, H = geom
    pad = k // 2
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, Ci, H, H + 1))
    w = rng.standard_normal((Co, Ci, k, k))
    ref = naive_conv(x, w, stride, pad)
    assert np.allclose(K.conv2d_numpy(x, w, stride, pad), ref, atol=1e-12)
    assert np.allclose(K.conv2d_numba(x, w, stride, pad), ref, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(geometry, st.integers(0, 2**31 - 1))
def test_gradients_are_adjoints(geom, seed):
    """<conv(x, w), g> = <x, dX(g)> = <w, dW(x, g)> for both backends."""
    B, Ci, Co, k, stride, H = geom
    pad = k // 2
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, Ci, H, H))
    w = rng.standard_normal((Co, Ci, k, k))
    y = K.conv2d_numpy(x, w, stride, pad)
    g = rng.standard_normal(y.shape)
    lhs = np.sum(y * g)
    for gi, gw in ((K.conv2d_input_grad_numpy, K.conv2d_weight_grad_numpy),
                   (K.conv2d_input_grad_numba, K.conv2d_weight_grad_numba)):
        dx = gi(g, w, x.shape, stride, pad)
        dw = gw(x, g, (k, k), stride, pad)
        assert dx.shape == x.shape and dw.shape == w.shape
        assert np.sum(x * dx) == pytest.approx(lhs, rel=1e-10, abs=1e-10)
        assert np.sum(w * dw) == pytest.approx(lhs, rel=1e-10, abs=1e-10)


def test_float32_inputs_stay_float32(rng):
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3))
    a = K.conv2d_numba(x, w, 1, 1)
    b = K.conv2d_numpy(x, w.astype(np.float32), 1, 1)
    assert a.dtype == np.float32
    assert np.allclose(a, b, atol=1e-4)


@pytest.mark.parametrize("flag,backend", [("0", "numpy"), ("off", "numpy"), ("1", "numba")])
def test_env_flag_selects_backend(flag, backend):
    env = dict(os.environ, LDEQ_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from lipdeq import _kernels; print(_kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == backend
