import math

import numpy as np
import pytest

from gmsde.flow import integrate_cov, integrate_mean
from gmsde.mixture import covariance_rate
from gmsde.model import SdeProblem, builtin_problem


def make_problem(d, drift, diffusion=None):
    if diffusion is None:
        diffusion = lambda x: np.zeros(x.shape[:-1] + (d, d))
    return SdeProblem(name="t", d=d, m=d, drift=drift, diffusion=diffusion)


def test_zero_drift_is_identity():
    p = make_problem(2, lambda x: np.zeros_like(x))
    x = np.array([1.5, -2.0])
    for solver in ("rk2", "rk4"):
        np.testing.assert_array_equal(integrate_mean(p, x, 0.3, solver), x)


def test_linear_drift_rk4_accuracy():
    # m' = -m from 2 over h = 0.1: rk4 error below |lam h|^5 / 5!
    p = make_problem(1, lambda x: -x)
    out = integrate_mean(p, np.array([2.0]), 0.1, "rk4")
    exact = 2.0 * math.exp(-0.1)
    assert abs(out[0] - exact) <= 2.0 * 0.1 ** 5 / 120.0


def test_rk2_is_heun():
    p = builtin_problem("rot2d")
    x = np.array([1.0, 1.0])
    h = 0.25
    k1 = p.drift(x)
    k2 = p.drift(x + h * k1)
    np.testing.assert_allclose(
        integrate_mean(p, x, h, "rk2"), x + 0.5 * h * (k1 + k2), atol=1e-15
    )


def test_mean_order_slopes():
    # against a reference taken with 100 substeps of the same scheme
    def drift(x):
        return np.stack([-x[..., 0] + np.sin(x[..., 1]), -0.5 * x[..., 1] ** 3], axis=-1)

    p = make_problem(2, drift)
    x0 = np.array([1.0, 0.7])
    hs = [2.0 ** -k for k in range(2, 7)]
    for solver, want in (("rk4", 4.5), ("rk2", 2.7)):
        errs = []
        for h in hs:
            ref = x0
            for _ in range(100):
                ref = integrate_mean(p, ref, h / 100.0, solver)
            errs.append(np.linalg.norm(integrate_mean(p, x0, h, solver) - ref))
        slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
        assert slope >= want


def test_constant_rate_exact():
    c = np.array([[2.0, 0.5], [0.5, 1.0]])
    p = make_problem(2, lambda x: np.zeros_like(x))
    rate = lambda x: np.broadcast_to(c, x.shape[:-1] + (2, 2))
    for solver in ("rk2", "rk4"):
        st = integrate_cov(p, np.array([0.0, 0.0]), 0.3, rate, solver)
        np.testing.assert_allclose(st.cov, 0.3 * c, atol=1e-14)


def test_frozen_state_rate_quad1d():
    # zero drift keeps m at x_n, so G(m(t)) = Lambda(x_n)/2 throughout
    base = builtin_problem("quad1d")
    p = make_problem(1, lambda x: np.zeros_like(x))
    rate = covariance_rate(base, np.array([2.0]))
    st = integrate_cov(p, np.array([2.0]), 0.125, rate, "rk4")
    assert st.cov[0, 0] == pytest.approx(0.5 * 8.0 * 0.125, abs=1e-14)


def test_additive_noise_any_drift():
    # state-independent Lambda: S = Lambda h / 2 regardless of the drift
    lam = np.array([[3.0, 1.0], [1.0, 2.0]])
    p = make_problem(2, lambda x: -2.0 * x)
    rate = lambda x: np.broadcast_to(0.5 * lam, x.shape[:-1] + (2, 2))
    st = integrate_cov(p, np.array([1.0, -1.0]), 0.2, rate, "rk4")
    np.testing.assert_allclose(st.cov, 0.5 * lam * 0.2, atol=1e-14)


def test_cov_bit_exact_symmetry():
    p = builtin_problem("rot2d")
    rate = covariance_rate(p, p.x0)
    for solver in ("rk2", "rk4"):
        st = integrate_cov(p, p.x0, 0.25, rate, solver)
        assert np.array_equal(st.cov, st.cov.T)


def test_joint_mean_matches_mean_only():
    p = builtin_problem("ring6d")
    rate = covariance_rate(p, p.x0)
    for solver in ("rk2", "rk4"):
        st = integrate_cov(p, p.x0, 0.1, rate, solver)
        np.testing.assert_array_equal(st.mean, integrate_mean(p, p.x0, 0.1, solver))


def test_cov_small_h_expansion():
    # S(h) = G(x)h + G'(x)b(x)h^2/2 + O(h^3); rk4's one-step S should
    # match this expansion with residual of order h^3 (slope >= 2.3)
    base = builtin_problem("quad1d")
    x = np.array([2.0])
    rate = covariance_rate(base, x)
    g0 = rate(x)[0, 0]
    bx = base.drift(x)[0]
    # d/dx Lambda = 2x -> dG/dt along the flow = 2 x b(x)
    gdot = 2.0 * x[0] * bx
    hs = [2.0 ** -k for k in range(4, 9)]
    res = []
    for h in hs:
        st = integrate_cov(base, x, h, rate, "rk4")
        res.append(abs(st.cov[0, 0] - g0 * h - 0.5 * gdot * h * h))
    slope = np.polyfit(np.log(hs), np.log(res), 1)[0]
    assert slope >= 2.3


def test_batched_matches_loop():
    p = builtin_problem("rot2d")
    rate = covariance_rate(p, p.x0)
    xs = np.random.default_rng(1).standard_normal((5, 2))
    st = integrate_cov(p, xs, 0.2, rate, "rk4")
    for i in range(5):
        single = integrate_cov(p, xs[i], 0.2, rate, "rk4")
        np.testing.assert_array_equal(st.mean[i], single.mean)
        np.testing.assert_array_equal(st.cov[i], single.cov)


def test_validation():
    p = builtin_problem("quad1d")
    rate = covariance_rate(p, p.x0)
    with pytest.raises(ValueError):
        integrate_mean(p, p.x0, 0.1, "euler")
    with pytest.raises(ValueError):
        integrate_mean(p, p.x0, -0.1)
    with pytest.raises(ValueError):
        integrate_cov(p, p.x0, 0.0, rate)
    bad = make_problem(1, lambda x: np.full_like(x, np.nan))
    with pytest.raises(ValueError):
        integrate_mean(bad, np.array([1.0]), 0.1)
