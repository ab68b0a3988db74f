import numpy as np
import pytest

from gmsde.model import builtin_problem
from gmsde.poly import (
    gauss_expect,
    generator_apply,
    p_degree,
    p_diff,
    p_directional,
    p_eval,
    p_mul,
)


def test_eval_and_degree():
    phi = {(2, 1): 3.0, (0, 0): -1.0}
    assert p_eval(phi, np.array([2.0, 0.5])) == pytest.approx(3.0 * 4.0 * 0.5 - 1.0)
    assert p_degree(phi) == 3


def test_mul_and_diff():
    x2 = {(2,): 1.0}
    x3 = {(3,): 1.0}
    assert p_mul(x2, x3) == {(5,): 1.0}
    assert p_diff(x3, 0) == {(2,): 3.0}
    # d/dv (x . v)^2 along v recovers 2 |v|^2-scaled structure
    phi = {(2, 0): 1.0, (0, 2): 1.0}
    dv = p_directional(phi, np.array([1.0, 1.0]))
    assert p_eval(dv, np.array([1.0, 2.0])) == pytest.approx(2.0 * 1.0 + 2.0 * 2.0)


def test_generator_quad1d():
    # L x^2 = 2 x b(x) + Lambda(x) = -4 x^2 + x^2 + 4 = -3 x^2 + 4
    p = builtin_problem("quad1d")
    lphi = generator_apply(p.b_poly, p.lam_poly, {(2,): 1.0})
    for x in (-1.0, 0.0, 2.0):
        assert p_eval(lphi, np.array([x])) == pytest.approx(-3.0 * x * x + 4.0, abs=1e-12)


def test_gauss_expect_moments():
    # N(mu, s2): E x = mu, E x^2 = mu^2 + s2, E x^4 central = 3 s2^2
    mu, s2 = 1.5, 0.7
    mean, cov = np.array([mu]), np.array([[s2]])
    assert gauss_expect({(1,): 1.0}, mean, cov) == pytest.approx(mu)
    assert gauss_expect({(2,): 1.0}, mean, cov) == pytest.approx(mu * mu + s2)
    central4 = (
        gauss_expect({(4,): 1.0}, np.zeros(1), cov)
    )
    assert central4 == pytest.approx(3.0 * s2 ** 2)


def test_gauss_expect_cross_moment():
    # E[x y] = cov_xy for a centered bivariate Gaussian
    cov = np.array([[2.0, 0.6], [0.6, 1.0]])
    assert gauss_expect({(1, 1): 1.0}, np.zeros(2), cov) == pytest.approx(0.6)
    # Monte Carlo cross-check on a degree-4 mixed moment
    rng = np.random.default_rng(0)
    draws = rng.multivariate_normal(np.array([0.3, -0.2]), cov, size=400_000)
    mc = np.mean(draws[:, 0] ** 2 * draws[:, 1] ** 2)
    exact = gauss_expect({(2, 2): 1.0}, np.array([0.3, -0.2]), cov)
    assert exact == pytest.approx(mc, rel=0.02)
