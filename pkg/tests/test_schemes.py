import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gmsde.flow import integrate_cov, integrate_mean
from gmsde.mixture import GAMMA, covariance_rate
from gmsde.model import SdeProblem, builtin_problem
from gmsde.schemes import (
    BatchDiagnostics,
    em_batch,
    em_step,
    gm_ode_batch,
    gm_ode_step,
    gm_var_batch,
    gm_var_step,
    make_stream,
    var_construct_1d,
)


def const_lam_problem(c=2.0, drift=None):
    if drift is None:
        drift = lambda x: np.zeros_like(x)
    sig = math.sqrt(c)
    return SdeProblem(
        name="const1d",
        d=1,
        m=1,
        drift=drift,
        diffusion=lambda x: np.full(x.shape[:-1] + (1, 1), sig),
    )


# ---------------------------------------------------------------------------
# Euler-Maruyama


def test_em_forced_zero_noise():
    p = builtin_problem("quad1d")
    out, diag = em_batch(p, np.array([[2.0]]), 0.01, None, draws=np.zeros((1, 1)))
    assert out[0, 0] == pytest.approx(2.0 - 4.0 * 0.01, abs=1e-15)
    assert diag.n == 1


def test_em_empirical_moments():
    p = builtin_problem("quad1d")
    n, h = 200_000, 0.01
    rng = make_stream(3)
    x = np.full((n, 1), 2.0)
    out, _ = em_batch(p, x, h, rng)
    lam = 8.0
    se_mean = math.sqrt(lam * h / n)
    assert abs(out.mean() - (2.0 - 4.0 * h)) <= 4.0 * se_mean
    se_var = lam * h * math.sqrt(2.0 / n)
    assert abs(out.var(ddof=1) - lam * h) <= 4.0 * se_var


# ---------------------------------------------------------------------------
# gm-ode


def test_gm_ode_forced_beam_center():
    # zero drift, u -> z = +1, xi = 0: the step lands on the beam center
    p = const_lam_problem(c=3.0)
    draws = (np.array([[0.2]]), np.zeros((1, 1)))
    out, diag = gm_ode_batch(p, np.array([[1.0]]), 0.04, None, draws=draws)
    assert out[0, 0] == pytest.approx(1.0 + math.sqrt(GAMMA * 3.0 * 0.04), abs=1e-14)
    assert diag.deterministic_fallback == 0


def test_gm_ode_additive_z0_variance():
    # constant Lambda = c and b = 0: S(h) = c h / 2 exactly, so with
    # forced z = 0 the output is x + sqrt(c h / 2) xi
    c, h = 2.0, 0.1
    p = const_lam_problem(c=c)
    xi = np.array([[1.7], [-0.3]])
    draws = (np.full((2, 1), 0.5), xi)
    out, _ = gm_ode_batch(p, np.zeros((2, 1)), h, None, draws=draws)
    np.testing.assert_allclose(out, math.sqrt(0.5 * c * h) * xi, atol=1e-14)


def test_gm_ode_empirical_variance():
    c, h, n = 2.0, 0.1, 200_000
    p = const_lam_problem(c=c)
    rng = make_stream(11)
    out, _ = gm_ode_batch(p, np.zeros((n, 1)), h, rng)
    # total one-step variance = gamma E z^2 c h + c h / 2 = c h
    se = c * h * math.sqrt(2.0 / n) * 2.0
    assert abs(out.var(ddof=1) - c * h) <= 4.0 * se


def test_gm_ode_gbm_fallback():
    # multiplicative noise at a coarse step: the z = -1 beam drifts to
    # small |x| where Lambda has shrunk enough that S(h) goes nonpositive
    p = builtin_problem("gbm")
    h = 0.25
    draws = (np.array([[0.05]]), np.array([[3.0]]))  # z = -1, large xi
    out, diag = gm_ode_batch(p, np.array([[5.0]]), h, None, draws=draws)
    assert diag.deterministic_fallback == 1
    # the noise draw is ignored: pure mean transport of the beam center
    m0 = np.array([[5.0 - math.sqrt(GAMMA * p.lam(np.array([5.0]))[0, 0] * h)]])
    rate = covariance_rate(p, np.array([5.0]))
    st_ = integrate_cov(p, m0, h, rate)
    assert st_.cov[0, 0, 0] <= 0.0
    np.testing.assert_allclose(out, st_.mean, atol=1e-14)


def test_gm_ode_no_fallback_at_fine_h():
    p = builtin_problem("gbm")
    rng = make_stream(5)
    x = np.full((10_000, 1), 5.0)
    for h in (1.0 / 16.0, 1.0 / 20.0):
        _, diag = gm_ode_batch(p, x, h, rng)
        assert diag.deterministic_fallback == 0


def test_gm_ode_multid_matches_1d_structure():
    # rot2d forced z = 0 in both directions, xi = 0: pure mean flow
    p = builtin_problem("rot2d")
    draws = (np.full((1, 2), 0.5), np.zeros((1, 2)))
    out, _ = gm_ode_batch(p, p.x0[None, :], 0.1, None, draws=draws)
    np.testing.assert_allclose(out[0], integrate_mean(p, p.x0, 0.1), atol=1e-14)


# ---------------------------------------------------------------------------
# gm-var


def test_gm_var_const_lambda_z0_exact():
    c = 2.0
    p = const_lam_problem(c=c)
    diag = BatchDiagnostics()
    s = var_construct_1d(p, np.zeros((1, 1)), np.zeros((1, 1), dtype=np.int64), 0.1, True, 0.1, diag)
    assert s[0] == pytest.approx(0.5 * c * 0.1, abs=1e-14)
    assert diag.singular_probe == 0


def test_gm_var_quad1d_side_beam_hand_value():
    p = builtin_problem("quad1d")
    h = 1.0 / 16.0
    diag = BatchDiagnostics()
    s = var_construct_1d(
        p, np.array([[2.0]]), np.array([[1]], dtype=np.int64), h, True, h, diag
    )
    probe = 2.0 + math.sqrt(6.0 * 8.0 * h) - 4.0 * h
    assert s[0] == pytest.approx(0.5 * h * (probe ** 2 + 4.0), rel=1e-13)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0.1, 10.0),
    st.floats(0.05, 5.0),
    st.floats(-3.0, 3.0),
    st.floats(1e-3, 0.5),
)
def test_gm_var_mid_beam_nonnegative(alpha, beta, x, h):
    # Lambda = alpha x^2 + beta: the cubic term completes the square, so
    # the z = 0 variance h a - b h^2 + (b^2 / a) h^3 is never negative
    sig = lambda xx: np.sqrt(alpha * xx[..., :1] ** 2 + beta)[..., None]
    p = SdeProblem(name="q", d=1, m=1, drift=lambda xx: -xx, diffusion=sig)
    diag = BatchDiagnostics()
    s = var_construct_1d(
        p, np.array([[x]]), np.zeros((1, 1), dtype=np.int64), h, True, h, diag
    )
    assert s[0] >= 0.0


def test_gm_var_cubic_identity():
    # h a - b h^2 + (b^2/a) h^3 = (h/a) ((a - b h/2)^2 + 3 b^2 h^2 / 4)
    rng = np.random.default_rng(8)
    for _ in range(100):
        a = rng.uniform(0.1, 5.0)
        b = rng.uniform(-5.0, 5.0)
        h = rng.uniform(1e-3, 0.5)
        lhs = h * a - b * h ** 2 + (b ** 2 / a) * h ** 3
        rhs = (h / a) * ((a - 0.5 * b * h) ** 2 + 0.75 * b ** 2 * h ** 2)
        assert lhs == pytest.approx(rhs, rel=1e-12)
        assert lhs >= 0.0


def test_gm_var_matches_gm_ode_to_high_order():
    # with a common z the two covariance constructions agree through
    # second order in h; their gap decays at least like h^2.3
    p = builtin_problem("quad1d")
    x = np.array([[2.0]])
    hs = [2.0 ** -k for k in range(4, 10)]
    weights = {-1: 1.0 / 6.0, 0: 2.0 / 3.0, 1: 1.0 / 6.0}
    per_beam = {z: [] for z in weights}
    weighted = []
    for h in hs:
        acc = 0.0
        for z in (-1, 0, 1):
            zc = np.array([[z]], dtype=np.int64)
            lam = p.lam(x)[0, 0, 0]
            m0 = x + z * math.sqrt(GAMMA * lam * h)
            rate = covariance_rate(p, x[0])
            s_ode = integrate_cov(p, m0, h, rate).cov[0, 0, 0]
            s_var = var_construct_1d(p, x, zc, h, True, h, BatchDiagnostics())[0]
            per_beam[z].append(abs(s_ode - s_var))
            acc += weights[z] * (s_ode - s_var)
        weighted.append(abs(acc))
    # each beam agrees through the h^{3/2} term at least ...
    for z, gaps in per_beam.items():
        slope = np.polyfit(np.log(hs), np.log(gaps), 1)[0]
        assert slope >= 1.7, (z, slope)
    # ... and the weighted average through the h^2 term
    slope_w = np.polyfit(np.log(hs), np.log(weighted), 1)[0]
    assert slope_w >= 2.3, slope_w


def test_gm_var_multid_psd_and_sampling():
    p = builtin_problem("rot2d")
    rng = make_stream(17)
    x = np.tile(p.x0, (5000, 1))
    out, diag = gm_var_batch(p, x, 0.25, rng)
    assert np.all(np.isfinite(out))
    assert diag.negative_variance == 0 and diag.clipped_eigs == 0


# ---------------------------------------------------------------------------
# streams, wrappers, strictness


def test_make_stream_keyed():
    a = make_stream(1, 0).random(4)
    b = make_stream(1, 0).random(4)
    c = make_stream(1, 1).random(4)
    d = make_stream(2, 0).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_single_wrappers():
    p = builtin_problem("rot2d")
    for step in (em_step, gm_ode_step, gm_var_step):
        out = step(p, p.x0, 0.1, make_stream(0))
        assert out.next_state.shape == (2,)
        assert np.all(np.isfinite(out.next_state))


@pytest.mark.filterwarnings("ignore:overflow")
def test_strict_false_returns_nonfinite():
    # exploding drift: strict mode raises, non-strict hands back inf/nan
    p = SdeProblem(
        name="boom",
        d=1,
        m=1,
        drift=lambda x: x ** 3 * 1e300,
        diffusion=lambda x: np.ones(x.shape[:-1] + (1, 1)),
    )
    x = np.array([[1e160]])
    rng = make_stream(0)
    with pytest.raises(FloatingPointError):
        em_batch(p, x, 0.5, rng)
    out, _ = em_batch(p, x, 0.5, make_stream(0), strict=False)
    assert not np.all(np.isfinite(out))


def test_h_validation():
    p = builtin_problem("quad1d")
    rng = make_stream(0)
    for bad in (0.0, -1.0, math.inf, math.nan):
        with pytest.raises(ValueError):
            em_batch(p, np.array([[1.0]]), bad, rng)
    with pytest.raises(ValueError):
        gm_ode_batch(p, np.ones((3, 2)), 0.1, rng)
