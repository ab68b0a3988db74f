import math

import numpy as np
import pytest

from gmsde.mc import (
    ErrorReport,
    fit_order,
    one_step_moments,
    run_weak_error,
    sample_states,
    second_moment_bound,
)
from gmsde.model import MomentOracle, SdeProblem, builtin_problem
from gmsde.schemes import BatchDiagnostics


def zero_noise_problem():
    # X' = -X deterministically; any oracle error is pure integrator error
    return SdeProblem(
        name="det",
        d=1,
        m=1,
        drift=lambda x: -x,
        diffusion=lambda x: np.zeros(x.shape[:-1] + (1, 1)),
        x0=np.array([2.0]),
        T=1.0,
        oracle=MomentOracle(
            label="E X",
            test_function=lambda x: x[..., 0],
            exact_expectation=lambda x0, T, params: 2.0 * math.exp(-T),
        ),
    )


def test_zero_noise_error_tiny():
    rep = run_weak_error(zero_noise_problem(), "gm-ode", h=1.0 / 64.0, samples=1000, slices=4, seed=1)
    assert rep.relative_error <= 1e-8
    assert rep.excluded == 0


def test_replay_bit_identical():
    p = builtin_problem("quad1d")
    a = run_weak_error(p, "gm-ode", h=0.25, samples=40_000, slices=4, seed=9)
    b = run_weak_error(p, "gm-ode", h=0.25, samples=40_000, slices=4, seed=9)
    assert a.estimate == b.estimate
    assert a.slice_estimates == b.slice_estimates


def test_worker_count_invariance():
    p = builtin_problem("quad1d")
    kw = dict(h=0.25, samples=400_000, slices=4, seed=9)
    a = run_weak_error(p, "gm-ode", threads=1, **kw)
    b = run_weak_error(p, "gm-ode", threads=4, **kw)
    assert a.estimate == b.estimate
    assert a.slice_estimates == b.slice_estimates
    assert a.sigma_E == b.sigma_E


def test_estimate_is_weighted_slice_mean():
    p = builtin_problem("gbm")
    rep = run_weak_error(p, "em", h=0.125, samples=30_000, slices=3, seed=2)
    counts = rep.samples // len(rep.slice_estimates)
    weighted = sum(e * counts for e in rep.slice_estimates) / rep.samples
    assert rep.estimate == pytest.approx(weighted, rel=1e-12)


def test_sigma_scaling_with_samples():
    # quadrupling N should roughly halve sigma_E (same seed, 30% slack)
    p = builtin_problem("quad1d")
    small = run_weak_error(p, "em", h=0.25, samples=100_000, slices=50, seed=4)
    big = run_weak_error(p, "em", h=0.25, samples=400_000, slices=50, seed=4)
    assert big.sigma_E <= 0.5 * small.sigma_E * 1.3
    assert big.sigma_E >= 0.5 * small.sigma_E / 1.3


def test_gm_beats_em_at_coarse_h():
    p = builtin_problem("quad1d")
    em = run_weak_error(p, "em", h=0.25, samples=400_000, slices=4, seed=0)
    gm = run_weak_error(p, "gm-ode", h=0.25, samples=400_000, slices=4, seed=0)
    assert gm.relative_error < em.relative_error


def test_validation_errors():
    p = builtin_problem("quad1d")
    with pytest.raises(ValueError):
        run_weak_error(p, "em", h=0.25, samples=100, slices=7)
    with pytest.raises(ValueError):
        run_weak_error(p, "em", h=0.3, samples=100, slices=4)  # 2/0.3 not whole
    with pytest.raises(ValueError):
        run_weak_error(p, "nope", h=0.25, samples=100, slices=4)
    no_oracle = SdeProblem(
        name="n", d=1, m=1, drift=lambda x: -x,
        diffusion=lambda x: np.ones(x.shape[:-1] + (1, 1)),
    )
    with pytest.raises(ValueError):
        run_weak_error(no_oracle, "em", h=0.25, samples=100, slices=4)


def test_spec_grid_step_counts_accepted():
    # T = 2 with h = 1/12 is one ulp away from 24 steps; it must be accepted
    p = builtin_problem("quad1d")
    rep = run_weak_error(p, "em", h=1.0 / 12.0, samples=1000, slices=2, seed=0)
    assert rep.samples == 1000


def make_report(h, err):
    return ErrorReport(
        h=h, samples=1, estimate=0.0, oracle=1.0, relative_error=err,
        slice_estimates=(0.0,), slice_errors=(err,), sigma_E=0.0,
        ci=(err, err), excluded=0, diagnostics=BatchDiagnostics(),
    )


def test_fit_order_exact_quadratic():
    hs = [0.5, 0.25, 0.125, 0.0625]
    slope, intercept, resid = fit_order([make_report(h, 0.4 * h ** 2) for h in hs])
    assert slope == pytest.approx(2.0, abs=1e-12)
    assert intercept == pytest.approx(math.log(0.4), abs=1e-12)
    assert resid <= 1e-24


def test_fit_order_errors():
    hs = [0.5, 0.25]
    with pytest.raises(ValueError):
        fit_order([make_report(h, h) for h in hs])
    with pytest.raises(ValueError):
        fit_order([make_report(0.5, 0.1), make_report(0.5, 0.1), make_report(0.25, 0.05)])
    with pytest.raises(ValueError):
        fit_order([make_report(h, 0.0) for h in (0.5, 0.25, 0.125)])


def test_sample_states_deterministic():
    p = builtin_problem("rot2d")
    a, _ = sample_states(p, "gm-var", 0.125, 4, 5000, seed=3)
    b, _ = sample_states(p, "gm-var", 0.125, 4, 5000, seed=3)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (5000, 2)


def test_one_step_moments_em_gaussian():
    p = builtin_problem("quad1d")
    m = one_step_moments(p, "em", h=1.0 / 32.0, samples=200_000, seed=1)
    assert abs(m["skewness"]) <= 0.02
    assert abs(m["kurtosis"] - 3.0) <= 0.05


def test_one_step_moments_validation():
    p = builtin_problem("rot2d")
    with pytest.raises(ValueError):
        one_step_moments(p, "em")
    q = builtin_problem("quad1d")
    with pytest.raises(ValueError):
        one_step_moments(q, "em", samples=100)


def test_second_moment_bound_holds():
    for name in ("quad1d", "gbm"):
        p = builtin_problem(name)
        for scheme in ("em", "gm-ode", "gm-var"):
            out = second_moment_bound(p, scheme, h=1.0 / 64.0, samples=50_000, seed=2)
            assert out["holds"], (name, scheme, out)
            assert out["M2_hat"] > 0.0
