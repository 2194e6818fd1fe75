from dataclasses import replace

import numpy as np
import pytest

from lipdeq.budget import calibrate_slope
from lipdeq.equilibrium import (BackwardDivergence, estimate_jacobian_norm, implicit_backward, jfb_backward,
                                power_jacobian_norm, solve_adjoint, solve_forward)
from lipdeq.model import (Linearization, ModelConfig, build_model, certified_bound, classify, classify_vjp,
                          cross_entropy, random_state)
from lipdeq.solvers import SolverConfig, solve
from lipdeq.tensors import MultiscaleState

TIGHT = SolverConfig(kind="anderson", tol=1e-12, metric="absolute", max_iter=200, lam=1e-10)


def contractive_cfg(L=0.8, **kw):
    base = dict(n=2, channels=(2, 4), height=8, width=8, seed=5)
    base.update(kw)
    cfg = ModelConfig(**base)
    return replace(cfg, lip=replace(cfg.lip, a=calibrate_slope(L, cfg.lip)))


# ---------------------------------------------------------------- scalar oracles

def test_scalar_fixed_point_and_gradients():
    theta, x = 0.5, 1.7
    rep = solve(lambda z: theta * z + x, np.zeros(1), TIGHT)
    z_star = rep.z_star.item()
    assert z_star == pytest.approx(2 * x, abs=1e-10)
    # loss = z*, so dl/dz* = 1; J^T a = theta * a
    adj = solve_adjoint(lambda a: theta * a, np.ones(1), TIGHT)
    A = adj.z_star.item()
    assert A == pytest.approx(2.0, abs=1e-10)
    assert A * z_star == pytest.approx(4 * x, abs=1e-9)  # implicit: A * df/dtheta
    assert 1.0 * z_star == pytest.approx(2 * x, abs=1e-10)  # JFB: A replaced by dl/dz*


def test_adjoint_zero_cotangent_converges_immediately():
    rep = solve_adjoint(lambda a: 0.5 * a, np.zeros((2, 3)), SolverConfig())
    assert rep.converged and rep.nfes == 1 and not np.any(rep.z_star)


def test_jfb_deviation_is_bounded_by_neumann_remainder(rng):
    d = 6
    for _ in range(20):
        J = rng.standard_normal((d, d))
        rho = rng.uniform(0.1, 0.9)
        J *= rho / np.linalg.norm(J, 2)
        g = rng.standard_normal(d)
        A = solve_adjoint(lambda a: J.T @ a, g, TIGHT).z_star
        assert np.allclose(A, np.linalg.solve(np.eye(d) - J.T, g), atol=1e-9)
        assert np.linalg.norm(A - g) / np.linalg.norm(g) <= rho / (1 - rho) + 1e-9


# ---------------------------------------------------------------- model-level

def test_zero_kernels_reach_fixed_point_fast(rng):
    cfg = ModelConfig(n=2, channels=(2, 4), height=8, width=8)
    params = build_model(cfg)
    for k, v in params.tensors.items():
        if k.endswith(".W") or k.endswith(".beta") or k.endswith(".b"):
            v[...] = 0.0
    res = solve_forward(params, rng.uniform(size=(2, 3, 8, 8)), SolverConfig(), mode="eval")
    assert res.forward_report.converged and res.forward_report.nfes <= 2


def test_forward_masks_are_frozen_and_reproducible(rng):
    params = build_model(contractive_cfg())
    x = rng.uniform(size=(3, 3, 8, 8))
    a = solve_forward(params, x, SolverConfig(), rng=np.random.default_rng(9))
    b = solve_forward(params, x, SolverConfig(), rng=np.random.default_rng(9))
    assert a.frozen_masks.keys() == b.frozen_masks.keys()
    assert all(np.array_equal(a.frozen_masks[k], b.frozen_masks[k]) for k in a.frozen_masks)
    assert np.array_equal(a.z_star.flat(), b.z_star.flat())
    c = solve_forward(params, x, SolverConfig(), masks=a.frozen_masks)
    assert np.array_equal(a.z_star.flat(), c.z_star.flat())
    e = solve_forward(params, x, SolverConfig(), mode="eval")
    assert e.frozen_masks is None


def full_loss(params, x, y, masks):
    res = solve_forward(params, x, TIGHT, masks=masks)
    return cross_entropy(classify(params, res.z_star), y)[0]


def test_implicit_gradient_matches_finite_differences(rng):
    params = build_model(contractive_cfg())
    x = rng.uniform(size=(2, 3, 8, 8))
    y = np.array([0, 2])
    res = solve_forward(params, x, TIGHT, rng=rng)
    loss, d = cross_entropy(classify(params, res.z_star), y)
    dz, head = classify_vjp(params, res.z_star, d)
    grads = implicit_backward(params, res, dz, TIGHT).param_grads
    grads.update(head)
    h = 1e-6  # the map is piecewise linear; larger steps can straddle a ReLU kink
    for name in ("res0.conv1.W", "fuse1_0.hop0.b", "post1.norm.gamma", "res1.norm3.beta", "inj.W", "head.W"):
        t = params.tensors[name]
        idx = tuple(rng.integers(0, s) for s in t.shape)
        old = t[idx]
        t[idx] = old + h
        up = full_loss(params, x, y, res.frozen_masks)
        t[idx] = old - h
        dn = full_loss(params, x, y, res.frozen_masks)
        t[idx] = old
        fd = (up - dn) / (2 * h)
        assert grads[name][idx] == pytest.approx(fd, rel=1e-4, abs=1e-9), name


def test_zero_cotangent_gives_zero_gradients(rng):
    params = build_model(contractive_cfg())
    res = solve_forward(params, rng.uniform(size=(2, 3, 8, 8)), SolverConfig(), rng=rng)
    zero = MultiscaleState.zeros(res.z_star.shapes)
    imp = implicit_backward(params, res, zero, SolverConfig())
    assert imp.backward_report.nfes == 1 and imp.backward_report.converged
    assert all(not np.any(g) for g in imp.param_grads.values())
    jfb = jfb_backward(params, res, zero)
    assert jfb.backward_report is None
    assert all(not np.any(g) for g in jfb.param_grads.values())


def test_jfb_differs_from_implicit_within_neumann_bound(rng):
    params = build_model(contractive_cfg(0.6))
    x = rng.uniform(size=(2, 3, 8, 8))
    res = solve_forward(params, x, TIGHT, rng=rng)
    v = random_state(params.cfg, 2, rng)
    imp = implicit_backward(params, res, v, TIGHT)
    jfb = jfb_backward(params, res, v)
    assert np.array_equal(jfb.A_vector.flat(), v.flat())
    dev = np.linalg.norm(imp.A_vector.flat() - v.flat()) / np.linalg.norm(v.flat())
    J = max(estimate_jacobian_norm(params, MultiscaleState((b[i:i + 1] for b in res.z_star)), x[i:i + 1],
                                   masks={k: m[i:i + 1] for k, m in res.frozen_masks.items()})
            for i in range(2))
    assert 0 < dev <= J / (1 - J) * (1 + 1e-3)
    assert any(not np.allclose(imp.param_grads[k], jfb.param_grads[k]) for k in imp.param_grads)


def test_backward_divergence_carries_certificate(rng, monkeypatch):
    params = build_model(contractive_cfg())
    res = solve_forward(params, rng.uniform(size=(1, 3, 8, 8)), SolverConfig(), rng=rng)
    monkeypatch.setattr(Linearization, "vjp_flat", lambda self, v: np.full_like(v, np.inf))
    with pytest.raises(BackwardDivergence) as err:
        implicit_backward(params, res, random_state(params.cfg, 1, rng), SolverConfig())
    assert err.value.certificate == pytest.approx(certified_bound(params).L)
    assert "certificate" in str(err.value)


def test_unconverged_forward_policy(rng):
    params = build_model(contractive_cfg())
    res = solve_forward(params, rng.uniform(size=(1, 3, 8, 8)), SolverConfig(tol=1e-14, max_iter=2), rng=rng)
    assert not res.forward_report.converged
    v = random_state(params.cfg, 1, rng)
    assert implicit_backward(params, res, v, SolverConfig()).param_grads
    with pytest.raises(ValueError):
        implicit_backward(params, res, v, SolverConfig(), allow_unconverged=False)


def test_cotangent_shape_check(rng):
    params = build_model(contractive_cfg())
    res = solve_forward(params, rng.uniform(size=(1, 3, 8, 8)), SolverConfig(), rng=rng)
    with pytest.raises(ValueError):
        jfb_backward(params, res, random_state(params.cfg, 2, rng))


# ---------------------------------------------------------------- Jacobian norm

def test_power_jacobian_norm_examples(rng):
    A = rng.standard_normal((7, 7))
    sigma = np.linalg.svd(A, compute_uv=False)[0]
    est = power_jacobian_norm(lambda z: z @ A.T, lambda v: v @ A, rng.standard_normal((1, 7)), iters=200)
    assert est == pytest.approx(sigma, rel=1e-3)
    assert power_jacobian_norm(lambda z: 0 * z, lambda v: 0 * v, np.ones((1, 3))) == 0.0
    assert power_jacobian_norm(lambda z: z, lambda v: v, np.ones((1, 3))) == pytest.approx(1.0, rel=1e-9)
    with pytest.raises(ValueError):
        power_jacobian_norm(lambda z: z, lambda v: v, np.ones(3), iters=0)
    with pytest.raises(FloatingPointError):
        power_jacobian_norm(lambda z: z * np.nan, lambda v: v, np.ones(3))


def test_model_jacobian_norm_is_below_certificate(rng):
    params = build_model(contractive_cfg())
    x = rng.uniform(size=(1, 3, 8, 8))
    res = solve_forward(params, x, TIGHT, rng=rng)
    J = estimate_jacobian_norm(params, res.z_star, x, masks=res.frozen_masks)
    assert 0 < J <= certified_bound(params).L * 1.001
    with pytest.raises(ValueError):
        estimate_jacobian_norm(build_model(ModelConfig(n=1, channels=(2,), height=4, width=4, dtype="float32")),
                               res.z_star, x)
