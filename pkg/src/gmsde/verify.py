"""Numerical verification of the scheme's order-condition mathematics.

Everything here cross-checks the step construction against independent
math: sqrt(h)-expansion coefficients of the beam mean and variance are
extracted numerically and compared to closed forms, the six second-order
moment constraints are evaluated, the exhaustive beam sum is compared to
its h^2 Taylor expansion, and the one-step mixture expectation is
compared to the semigroup expansion phi + h L phi + h^2/2 L^2 phi using
exact Gaussian moments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import flow, linalg, mixture, poly, schemes
from .model import SdeProblem, lambda_at
from .poly import Poly

__all__ = [
    "ExpansionCoeffs",
    "extract_expansion",
    "closed_form_coeffs_1d",
    "check_order_conditions",
    "semigroup_residual",
    "beam_sum_residual",
    "positivity_check",
    "fd1",
    "fd2",
]

# small enough that terms beyond the fitted sqrt(h)-powers are negligible,
# large enough that the covariance values stay well above roundoff
_DEFAULT_H_GRID = 2.0 ** -np.arange(8, 16)


def fd1(f, x0: float, delta: float) -> float:
    return (f(x0 + delta) - f(x0 - delta)) / (2.0 * delta)


def fd2(f, x0: float, delta: float) -> float:
    return (f(x0 + delta) - 2.0 * f(x0) + f(x0 - delta)) / delta ** 2


def _scalar_coeffs(problem: SdeProblem):
    """Scalar views of b and Lambda for a 1D problem."""
    if problem.d != 1:
        raise ValueError("this check is stated in 1D")

    def b(x):
        return float(problem.drift(np.array([[x]]))[0, 0])

    def lam(x):
        return float(problem.lam(np.array([[x]]))[0, 0, 0])

    return b, lam


@dataclass(frozen=True)
class ExpansionCoeffs:
    """Fitted sqrt(h)-expansion of one beam's mean and variance:
    m(h) = x0 + m0 h^{1/2} + m1 h + m2 h^{3/2} + m3 h^2 + ...,
    S(h) = s1 h + s2 h^{3/2} + s3 h^2 + ...
    """

    m_coeffs: np.ndarray  # (m0, m1, m2, m3)
    s_coeffs: np.ndarray  # (s1, s2, s3)
    extraction_h_grid: np.ndarray
    m_resid_rel: float
    s_resid_rel: float
    condition: float


def _fit_sqrt_series(h: np.ndarray, y: np.ndarray, first_power: int, n_terms: int):
    """Least-squares fit  y = sum_k c_k h^{k/2}  for k = first_power ...

    Returns the coefficients, the relative residual at the smallest h,
    and the condition number of the (scaled) design matrix.
    """
    s = np.sqrt(h)
    smax = s.max()
    t = s / smax
    powers = np.arange(first_power, first_power + n_terms)
    design = t[:, None] ** powers[None, :]
    cond = float(np.linalg.cond(design))
    if cond > 1e12:
        raise FloatingPointError(f"expansion extraction ill-conditioned (cond ~ {cond:.2e})")
    coef_t, *_ = np.linalg.lstsq(design, y, rcond=None)
    coef = coef_t / smax ** powers
    k = int(np.argmin(h))
    fit_k = float(design[k] @ coef_t)
    resid = abs(fit_k - y[k]) / (abs(y[k]) + 1e-300)
    return coef, resid, cond


def extract_expansion(
    problem: SdeProblem,
    x0: float,
    z: int,
    h_grid: Optional[np.ndarray] = None,
    solver: str = "rk4",
) -> ExpansionCoeffs:
    """Extract the beam expansion coefficients from the flow itself (1D)."""
    if problem.d != 1:
        raise ValueError("expansion extraction is implemented for d = 1")
    h_grid = np.asarray(_DEFAULT_H_GRID if h_grid is None else h_grid, dtype=float)
    if h_grid.size < 5:
        raise ValueError("need at least 5 grid points")

    lam0 = float(lambda_at(problem, [x0])[0, 0])
    eig = linalg.SymEig(np.array([lam0]), np.ones((1, 1)))
    rate = mixture.covariance_rate(problem, np.array([x0]))

    dm = np.empty_like(h_grid)
    sv = np.empty_like(h_grid)
    for j, h in enumerate(h_grid):
        m0 = mixture.beam_center(np.array([x0]), np.array([z]), eig, h)
        state = flow.integrate_cov(problem, m0[None, :], h, rate, solver=solver)
        dm[j] = state.mean[0, 0] - x0
        sv[j] = state.cov[0, 0, 0]

    m_coef, m_res, cond_m = _fit_sqrt_series(h_grid, dm, 1, 7)
    s_coef, s_res, cond_s = _fit_sqrt_series(h_grid, sv, 2, 6)
    return ExpansionCoeffs(
        m_coeffs=m_coef[:4],
        s_coeffs=s_coef[:3],
        extraction_h_grid=h_grid,
        m_resid_rel=m_res,
        s_resid_rel=s_res,
        condition=max(cond_m, cond_s),
    )


def closed_form_coeffs_1d(problem: SdeProblem, x0: float, z: int, delta: Optional[float] = None):
    """The analytic expansion coefficients of the 1D ODE-flow beam, with
    derivatives of b and Lambda taken by central differences.

    Returns (m_coeffs, s_coeffs) in the same layout as ExpansionCoeffs.
    """
    b, lam = _scalar_coeffs(problem)
    if delta is None:
        delta = 1e-4 * (1.0 + abs(x0))
    gam = mixture.GAMMA
    L = lam(x0)
    bp = fd1(b, x0, delta)
    bpp = fd2(b, x0, delta)
    Lp = fd1(lam, x0, delta)
    Lpp = fd2(lam, x0, delta)
    root = z * np.sqrt(gam * L)
    m_coeffs = np.array(
        [root, b(x0), bp * root, 0.5 * bpp * z * z * gam * L + 0.5 * b(x0) * bp]
    )
    # S' = g(m) with g = Lambda - Lambda(x0)/2, so g(x0) = L/2, g' = L', g'' = L''
    s_coeffs = np.array(
        [0.5 * L, Lp * root, 0.75 * z * z * Lpp * L + 0.5 * Lp * b(x0)]
    )
    return m_coeffs, s_coeffs


def check_order_conditions(
    problem: SdeProblem,
    x0: float,
    w1: float = mixture.W1,
    h_grid: Optional[np.ndarray] = None,
    delta: Optional[float] = None,
) -> np.ndarray:
    """Residuals of the six second-order moment constraints (1D).

    Coefficients are extracted from the flow; derivatives of b and Lambda
    come from central differences.  ``w1`` can be perturbed to confirm
    the checker detects a broken weight choice.  Returns residuals
    normalized by 1 + |rhs|.
    """
    b, lam = _scalar_coeffs(problem)
    if delta is None:
        delta = 1e-4 * (1.0 + abs(x0))
    weights = {-1: w1, 0: 1.0 - 2.0 * w1, 1: w1}
    m = {}
    s = {}
    for z in (-1, 0, 1):
        coeffs = extract_expansion(problem, x0, z, h_grid=h_grid)
        m[z], s[z] = coeffs.m_coeffs, coeffs.s_coeffs

    def wsum(f):
        return sum(weights[z] * f(m[z], s[z]) for z in (-1, 0, 1))

    B = b(x0)
    L = lam(x0)
    bp = fd1(b, x0, delta)
    bpp = fd2(b, x0, delta)
    Lp = fd1(lam, x0, delta)
    Lpp = fd2(lam, x0, delta)

    lhs = np.array(
        [
            wsum(lambda mc, sc: mc[1]),
            0.5 * wsum(lambda mc, sc: sc[0]) + 0.5 * wsum(lambda mc, sc: mc[0] ** 2),
            wsum(lambda mc, sc: mc[3]),
            0.5 * wsum(lambda mc, sc: sc[2])
            + 0.5 * wsum(lambda mc, sc: 2.0 * mc[0] * mc[2] + mc[1] ** 2),
            0.5 * wsum(lambda mc, sc: mc[1] * sc[0])
            + 0.5 * wsum(lambda mc, sc: mc[0] * sc[1])
            + 0.5 * wsum(lambda mc, sc: mc[0] ** 2 * mc[1]),
            0.125 * wsum(lambda mc, sc: sc[0] ** 2)
            + 0.25 * wsum(lambda mc, sc: mc[0] ** 2 * sc[0])
            + wsum(lambda mc, sc: mc[0] ** 4) / 24.0,
        ]
    )
    rhs = np.array(
        [
            B,
            0.5 * L,
            0.5 * B * bp + 0.25 * L * bpp,
            0.5 * B ** 2 + 0.25 * B * Lp + 0.5 * L * bp + 0.125 * L * Lpp,
            0.5 * B * L + 0.25 * L * Lp,
            0.125 * L ** 2,
        ]
    )
    return np.abs(lhs - rhs) / (1.0 + np.abs(rhs))


def _beam_moments(
    problem: SdeProblem,
    x0: np.ndarray,
    z: np.ndarray,
    eig: linalg.SymEig,
    h: float,
    kernel: str,
    solver: str,
    include_cubic: bool,
):
    """Evolved (mean, covariance) of one beam under the chosen kernel,
    with the kernel's own negative-variance handling applied."""
    d = x0.shape[0]
    m0 = mixture.beam_center(x0, z, eig, h)
    if kernel == "gm-ode":
        rate = mixture.covariance_rate(problem, x0)
        state = flow.integrate_cov(problem, m0[None, :], h, rate, solver=solver)
        mean, cov = state.mean[0], state.cov[0]
        if d == 1:
            cov = np.maximum(cov, 0.0)
        else:
            cov, _ = linalg.psd_clip(cov)
        return mean, cov
    if kernel == "gm-var":
        mean = flow.integrate_mean(problem, m0[None, :], h, solver=solver)[0]
        diag = schemes.BatchDiagnostics()
        if d == 1:
            sv = schemes.var_construct_1d(
                problem, x0[None, :], z[None, :], h, include_cubic, h, diag
            )
            cov = np.maximum(sv, 0.0).reshape(1, 1)
        else:
            cov = schemes.var_construct_md(
                problem,
                x0[None, :],
                z[None, :],
                eig.eigenvalues[None, :],
                eig.eigenvectors[None, :, :],
                h,
                include_cubic,
                h,
                diag,
            )[0]
            cov, _ = linalg.psd_clip(cov)
        return mean, cov
    raise ValueError(f"unknown kernel {kernel!r}")


def semigroup_residual(
    problem: SdeProblem,
    x0,
    phi: Poly,
    h: float,
    kernel: str = "gm-ode",
    solver: str = "rk4",
    include_cubic: bool = True,
) -> float:
    """|sum_p w_p E_{N(m_p, S_p)} phi  -  (phi + h L phi + h^2/2 L^2 phi)(x0)|.

    Beams are enumerated exhaustively (d <= 3) and Gaussian expectations
    are exact, so the residual isolates the kernel's local truncation
    error.  ``kernel`` may also be "single-gauss": the one-Gaussian
    Euler-type kernel (mean x0 + b h, covariance Lambda h) that second
    order provably cannot reach.
    """
    x0 = np.asarray(x0, dtype=float)
    d = problem.d
    if d > 3:
        raise ValueError("beam enumeration is limited to d <= 3")
    if problem.b_poly is None or problem.lam_poly is None:
        raise ValueError("problem must carry polynomial coefficient forms")

    lphi = poly.generator_apply(problem.b_poly, problem.lam_poly, phi)
    l2phi = poly.generator_apply(problem.b_poly, problem.lam_poly, lphi)
    target = (
        poly.p_eval(phi, x0)
        + h * poly.p_eval(lphi, x0)
        + 0.5 * h ** 2 * poly.p_eval(l2phi, x0)
    )

    if kernel == "single-gauss":
        mean = x0 + problem.drift(x0[None, :])[0] * h
        cov = lambda_at(problem, x0) * h
        return abs(poly.gauss_expect(phi, mean, cov) - target)

    eig = linalg.sym_eig(lambda_at(problem, x0))
    total = 0.0
    for z, w in mixture.enumerate_beams(d):
        mean, cov = _beam_moments(problem, x0, z, eig, h, kernel, solver, include_cubic)
        total += w * poly.gauss_expect(phi, mean, cov)
    return abs(total - target)


def _random_affine_problem(rng: np.random.Generator, d: int) -> SdeProblem:
    """A throwaway problem with linear drift and affine diffusion factor
    sigma(x) = A0 + sum_i x_i A_i, so Lambda is smooth and generically
    nontrivial."""
    drift_mat = rng.standard_normal((d, d))
    a0 = rng.standard_normal((d, d)) + 2.0 * np.eye(d)
    ai = 0.5 * rng.standard_normal((d, d, d))

    def drift(x):
        return x @ drift_mat.T

    def diffusion(x):
        return a0 + np.einsum("...i,ijk->...jk", x, ai)

    from .model import SdeProblem as _P

    return _P(name="affine-random", d=d, m=d, drift=drift, diffusion=diffusion)


def positivity_check(n_configs: int = 1000, seed: int = 0, include_cubic: bool = True) -> dict:
    """Stress the variance-construction covariance over random problems,
    states, offsets, and step sizes.

    Returns the worst pre-clip minimum eigenvalue relative to ||S|| and
    the total count of eigenvalues the PSD projection would clip.  With
    the cubic completion term the construction is PSD by algebra, so both
    should sit at roundoff.
    """
    rng = np.random.default_rng(seed)
    worst = np.inf
    clipped_total = 0
    singular = 0
    for _ in range(n_configs):
        d = int(rng.integers(1, 7))
        problem = _random_affine_problem(rng, d)
        x = rng.standard_normal((1, d))
        h = float(10.0 ** rng.uniform(-3.0, np.log10(0.5)))
        z = rng.integers(-1, 2, size=(1, d))
        diag = schemes.BatchDiagnostics()
        if d == 1:
            s = schemes.var_construct_1d(problem, x, z, h, include_cubic, h, diag)
            s_mat = s.reshape(1, 1)
        else:
            eig = linalg.sym_eig(problem.lam(x)[0])
            s_mat = schemes.var_construct_md(
                problem,
                x,
                z,
                eig.eigenvalues[None, :],
                eig.eigenvectors[None, :, :],
                h,
                include_cubic,
                h,
                diag,
            )[0]
        singular += diag.singular_probe
        w = np.linalg.eigvalsh(s_mat)
        scale = max(float(np.max(np.abs(w))), 1e-300)
        worst = min(worst, float(w[0]) / scale)
        clipped_total += linalg.psd_clip(s_mat)[1]
    return {
        "worst_min_eig_rel": worst,
        "clipped": clipped_total,
        "singular_probe": singular,
        "configs": n_configs,
    }


def beam_sum_residual(lam_mat: np.ndarray, x0: np.ndarray, phi: Poly, h: float) -> float:
    """Residual of the exhaustive beam sum against its h^2 expansion.

    sum_p w_p phi(y_p) should equal
      phi + sum_i w1 D_i^2 phi gamma lam_i h
      + 1/2 sum_{i != j} w1^2 gamma^2 D_i^2 D_j^2 phi lam_i lam_j h^2
      + 1/12 sum_i w1 gamma^2 D_i^4 phi lam_i^2 h^2
    up to O(h^3), where D_i differentiates along the i-th eigenvector.
    """
    x0 = np.asarray(x0, dtype=float)
    d = x0.shape[0]
    eig = linalg.sym_eig(np.asarray(lam_mat, dtype=float))
    lam, vecs = eig.eigenvalues, eig.eigenvectors
    gam = mixture.GAMMA
    w1 = mixture.W1

    lhs = 0.0
    for z, w in mixture.enumerate_beams(d):
        y = mixture.beam_center(x0, z, eig, h)
        lhs += w * poly.p_eval(phi, y)

    d2 = [poly.p_directional(poly.p_directional(phi, vecs[:, i]), vecs[:, i]) for i in range(d)]
    rhs = poly.p_eval(phi, x0)
    for i in range(d):
        rhs += w1 * poly.p_eval(d2[i], x0) * gam * lam[i] * h
        d4 = poly.p_directional(poly.p_directional(d2[i], vecs[:, i]), vecs[:, i])
        rhs += poly.p_eval(d4, x0) * w1 * gam ** 2 * lam[i] ** 2 * h ** 2 / 12.0
        for j in range(d):
            if j != i:
                d2d2 = poly.p_directional(poly.p_directional(d2[i], vecs[:, j]), vecs[:, j])
                rhs += 0.5 * w1 ** 2 * gam ** 2 * poly.p_eval(d2d2, x0) * lam[i] * lam[j] * h ** 2
    return abs(lhs - rhs)
