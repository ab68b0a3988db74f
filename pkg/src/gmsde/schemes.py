"""One-step transition kernels.

Three kernels share a common shape: Euler-Maruyama (the order-1
baseline), the Gaussian-mixture ODE-flow step, and the Gaussian-mixture
variance-construction step (covariance assembled from probes of Lambda
instead of an ODE, positive semidefinite by construction).

Every kernel exists in a batched form ``*_batch`` acting on an (n, d)
array of independent trajectories; the single-state functions wrap the
batch kernels.  Randomness enters only through an explicit generator,
and each step consumes a fixed number of draws (offset uniforms first,
then Gaussians) so streams stay aligned across code paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import flow, mixture
from .model import SdeProblem

__all__ = [
    "StepOutcome",
    "BatchDiagnostics",
    "em_step",
    "gm_ode_step",
    "gm_var_step",
    "em_batch",
    "gm_ode_batch",
    "gm_var_batch",
    "var_construct_1d",
    "var_construct_md",
    "make_stream",
    "SCHEME_NAMES",
]

SCHEME_NAMES = ("em", "gm-ode", "gm-var")

_EIG_ZERO_BAND = 1e-12


@dataclass
class BatchDiagnostics:
    """Per-call event counts over a batch of one-step transitions."""

    n: int = 0
    deterministic_fallback: int = 0  # 1D: S(h) <= 0, returned the mean
    negative_variance: int = 0  # samples whose S(h) had a clipped eigenvalue
    clipped_eigs: int = 0  # total eigenvalues clipped across the batch
    singular_probe: int = 0  # variance construction: A not invertible, F dropped

    def merge(self, other: "BatchDiagnostics") -> None:
        self.n += other.n
        self.deterministic_fallback += other.deterministic_fallback
        self.negative_variance += other.negative_variance
        self.clipped_eigs += other.clipped_eigs
        self.singular_probe += other.singular_probe


@dataclass(frozen=True)
class StepOutcome:
    """Next state plus the diagnostic events of this one step."""

    next_state: np.ndarray
    negative_variance: bool = False
    clipped_eigs: int = 0
    deterministic_fallback: bool = False
    singular_probe: bool = False


def make_stream(seed: int, index: int = 0) -> np.random.Generator:
    """A counter-based stream keyed by (seed, index); streams with
    distinct keys are statistically independent, so workers can draw
    concurrently without coordination."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))


def _as_batch(x: np.ndarray, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape != (d,):
            raise ValueError(f"state must have length {d}")
        return x[None, :]
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"state batch must have shape (n, {d})")
    return x


def _check_h(h: float) -> None:
    if not (h > 0.0) or not np.isfinite(h):
        raise ValueError("h must be a positive finite number")


# ---------------------------------------------------------------------------
# Euler-Maruyama


def em_batch(
    problem: SdeProblem,
    x: np.ndarray,
    h: float,
    rng: Optional[np.random.Generator],
    draws: Optional[np.ndarray] = None,
    strict: bool = True,
) -> Tuple[np.ndarray, BatchDiagnostics]:
    """X' = X + b(X) h + sigma(X) dW,  dW ~ N(0, h I_m).

    ``draws`` may supply the (n, m) standard normals instead of ``rng``;
    ``strict=False`` returns non-finite states to the caller instead of
    raising (the Monte Carlo harness excludes them itself).
    """
    _check_h(h)
    x = _as_batch(x, problem.d)
    n = x.shape[0]
    xi = rng.standard_normal((n, problem.m)) if draws is None else draws
    b = problem.drift(x)
    sig = problem.diffusion(x)
    out = x + b * h + np.einsum("nij,nj->ni", sig, xi) * np.sqrt(h)
    if strict and not np.all(np.isfinite(out)):
        raise FloatingPointError("Euler-Maruyama step produced non-finite states")
    return out, BatchDiagnostics(n=n)


# ---------------------------------------------------------------------------
# Gaussian mixture, ODE-flow covariance


def _sample_from_cov(
    mean: np.ndarray, cov: np.ndarray, xi: np.ndarray, diag: BatchDiagnostics
) -> np.ndarray:
    """Clip negative eigenvalues of each covariance and sample
    mean + U sqrt(mu+) xi.  Records clip events in ``diag``."""
    mu, vecs = np.linalg.eigh(cov)
    band = _EIG_ZERO_BAND * np.maximum(np.max(np.abs(mu), axis=-1, keepdims=True), 1e-300)
    neg = mu < -band
    diag.negative_variance += int(np.sum(np.any(neg, axis=-1)))
    diag.clipped_eigs += int(np.sum(neg))
    mu_plus = np.where(mu <= band, 0.0, mu)
    scale = np.sqrt(mu_plus)
    return mean + np.einsum("nij,nj->ni", vecs * scale[:, None, :], xi)


def gm_ode_batch(
    problem: SdeProblem,
    x: np.ndarray,
    h: float,
    rng: Optional[np.random.Generator],
    solver: str = "rk4",
    draws: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    strict: bool = True,
) -> Tuple[np.ndarray, BatchDiagnostics]:
    """One Gaussian-mixture step with the beam covariance integrated
    along the mean flow:  S' = Lambda(m(t)) - Lambda(x_n)/2,  S(0) = 0.

    In 1D a nonpositive S(h) falls back to the deterministic mean; in
    higher dimensions negative eigenvalues of S(h) are clipped to zero.
    ``draws`` may supply the ((n, d) uniforms, (n, d) normals) pair
    instead of ``rng``; ``strict=False`` returns non-finite states
    instead of raising.
    """
    _check_h(h)
    x = _as_batch(x, problem.d)
    n, d = x.shape
    u, xi = draws if draws is not None else (rng.random((n, d)), rng.standard_normal((n, d)))
    z = mixture.z_from_uniform(u)
    diag = BatchDiagnostics(n=n)

    lam_x = problem.lam(x)  # (n, d, d)

    if d == 1:
        lam = np.maximum(lam_x[:, 0, 0], 0.0)
        m0 = x + (z[:, 0] * np.sqrt(mixture.GAMMA * lam * h))[:, None]
        half_anchor = 0.5 * lam_x[:, 0, 0]

        def rate(y):
            return problem.lam(y) - half_anchor[:, None, None]

        state = flow.integrate_cov(problem, m0, h, rate, solver=solver)
        s = state.cov[:, 0, 0]
        fallback = s <= 0.0
        diag.deterministic_fallback = int(np.sum(fallback))
        out = state.mean.copy()
        out[:, 0] += np.where(fallback, 0.0, np.sqrt(np.maximum(s, 0.0)) * xi[:, 0])
        if strict and not np.all(np.isfinite(out)):
            raise FloatingPointError("gm-ode step produced non-finite states")
        return out, diag

    w, vecs = np.linalg.eigh(lam_x)
    disp = z * np.sqrt(mixture.GAMMA * np.maximum(w, 0.0) * h)
    m0 = x + np.einsum("nij,nj->ni", vecs, disp)
    half_anchor = 0.5 * lam_x

    def rate(y):
        return problem.lam(y) - half_anchor

    state = flow.integrate_cov(problem, m0, h, rate, solver=solver)
    out = _sample_from_cov(state.mean, state.cov, xi, diag)
    if strict and not np.all(np.isfinite(out)):
        raise FloatingPointError("gm-ode step produced non-finite states")
    return out, diag


# ---------------------------------------------------------------------------
# Gaussian mixture, direct variance construction


def var_construct_1d(
    problem: SdeProblem,
    x: np.ndarray,
    z: np.ndarray,
    h: float,
    include_cubic: bool,
    delta: float,
    diag: BatchDiagnostics,
) -> np.ndarray:
    """1D beam variance from probes of Lambda, per sampled z (n, 1).

    z = +-1 probes Lambda at x + z sqrt(6 Lambda h) + h b; z = 0 uses the
    drift-shifted point with a finite-difference curvature correction and
    (optionally) the cubic term that completes the square.
    """
    lam_x = problem.lam(x)[:, 0, 0]
    bx = problem.drift(x)
    zc = z[:, 0].astype(float)

    probe = x + (zc * np.sqrt(6.0 * np.maximum(lam_x, 0.0) * h))[:, None] + h * bx
    s_side = 0.5 * h * problem.lam(probe)[:, 0, 0]

    xp = x + h * bx
    a0 = 0.5 * problem.lam(xp)[:, 0, 0]
    d2 = (
        problem.lam(x + delta)[:, 0, 0] - 2.0 * lam_x + problem.lam(x - delta)[:, 0, 0]
    ) / delta ** 2
    bval = (3.0 / 8.0) * lam_x * d2
    ok = a0 > 1e-300
    diag.singular_probe += int(np.sum(~ok & (z[:, 0] == 0)))
    s_mid = h * a0 - bval * h ** 2
    if include_cubic:
        s_mid = s_mid + np.where(ok, bval ** 2 / np.where(ok, a0, 1.0), 0.0) * h ** 3
    return np.where(z[:, 0] == 0, s_mid, s_side)


def var_construct_md(
    problem: SdeProblem,
    x: np.ndarray,
    z: np.ndarray,
    w: np.ndarray,
    vecs: np.ndarray,
    h: float,
    include_cubic: bool,
    delta: float,
    diag: BatchDiagnostics,
) -> np.ndarray:
    """Multi-d beam covariance  h A + h^2 B (+ h^3 B A^-1 B / 4).

    A probes Lambda at the sqrt(6 lambda_i h)-shifted point, B is the
    finite-difference curvature along the unsampled eigen-directions, and
    the cubic term makes the sum exactly PSD.  A singular A drops the
    cubic term for that sample and flags it.
    """
    lam_x = problem.lam(x)
    bx = problem.drift(x)
    w_plus = np.maximum(w, 0.0)

    probe = x + np.einsum("nij,nj->ni", vecs, z * np.sqrt(6.0 * w_plus * h)) + h * bx
    a_mat = 0.5 * problem.lam(probe)

    theta = np.einsum("nij,nj->ni", vecs, np.sqrt((1.0 - np.abs(z)) * w_plus))
    c_mat = (
        problem.lam(x + delta * theta) - 2.0 * lam_x + problem.lam(x - delta * theta)
    ) / delta ** 2
    b_mat = -(3.0 / 8.0) * c_mat

    s = h * a_mat + h ** 2 * b_mat
    if include_cubic:
        wa = np.linalg.eigvalsh(a_mat)
        ok = wa[:, 0] > 1e-12 * np.maximum(np.abs(wa[:, -1]), 1e-300)
        diag.singular_probe += int(np.sum(~ok))
        f_mat = np.zeros_like(a_mat)
        if np.any(ok):
            ainv_b = np.linalg.solve(a_mat[ok], b_mat[ok])
            f_mat[ok] = 0.25 * b_mat[ok] @ ainv_b
        s = s + h ** 3 * f_mat
    return 0.5 * (s + np.swapaxes(s, -1, -2))


def gm_var_batch(
    problem: SdeProblem,
    x: np.ndarray,
    h: float,
    rng: Optional[np.random.Generator],
    solver: str = "rk4",
    include_cubic: bool = True,
    fd_step: Optional[float] = None,
    draws: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    strict: bool = True,
) -> Tuple[np.ndarray, BatchDiagnostics]:
    """One Gaussian-mixture step with the beam covariance built from
    probes of Lambda.

    The beam mean starts from the usual sqrt(3/2 lambda_i h) offsets and
    follows m' = b(m); the covariance uses probes shifted by
    sqrt(6 lambda_i h) plus a finite-difference curvature correction and,
    when ``include_cubic`` is set, a cubic-in-h term that makes S(h)
    positive semidefinite exactly.  ``fd_step`` defaults to h.
    """
    _check_h(h)
    x = _as_batch(x, problem.d)
    n, d = x.shape
    delta = h if fd_step is None else float(fd_step)
    u, xi = draws if draws is not None else (rng.random((n, d)), rng.standard_normal((n, d)))
    z = mixture.z_from_uniform(u)
    diag = BatchDiagnostics(n=n)

    if d == 1:
        lam = np.maximum(problem.lam(x)[:, 0, 0], 0.0)
        m0 = x + (z[:, 0] * np.sqrt(mixture.GAMMA * lam * h))[:, None]
        mean = flow.integrate_mean(problem, m0, h, solver=solver)
        s = var_construct_1d(problem, x, z, h, include_cubic, delta, diag)
        neg = s < 0.0
        diag.negative_variance = int(np.sum(neg))
        diag.clipped_eigs = int(np.sum(neg))
        out = mean.copy()
        out[:, 0] += np.sqrt(np.maximum(s, 0.0)) * xi[:, 0]
        if strict and not np.all(np.isfinite(out)):
            raise FloatingPointError("gm-var step produced non-finite states")
        return out, diag

    w, vecs = np.linalg.eigh(problem.lam(x))
    w_plus = np.maximum(w, 0.0)
    m0 = x + np.einsum("nij,nj->ni", vecs, z * np.sqrt(mixture.GAMMA * w_plus * h))
    mean = flow.integrate_mean(problem, m0, h, solver=solver)
    s = var_construct_md(problem, x, z, w, vecs, h, include_cubic, delta, diag)
    out = _sample_from_cov(mean, s, xi, diag)
    if strict and not np.all(np.isfinite(out)):
        raise FloatingPointError("gm-var step produced non-finite states")
    return out, diag


# ---------------------------------------------------------------------------
# single-state wrappers


def _single(batch_fn, problem, x_n, h, rng, **kw) -> StepOutcome:
    out, diag = batch_fn(problem, np.asarray(x_n, dtype=float), h, rng, **kw)
    return StepOutcome(
        next_state=out[0] if out.ndim == 2 else out,
        negative_variance=diag.negative_variance > 0,
        clipped_eigs=diag.clipped_eigs,
        deterministic_fallback=diag.deterministic_fallback > 0,
        singular_probe=diag.singular_probe > 0,
    )


def em_step(problem: SdeProblem, x_n, h: float, rng: np.random.Generator) -> StepOutcome:
    return _single(em_batch, problem, _as_batch(x_n, problem.d), h, rng)


def gm_ode_step(
    problem: SdeProblem, x_n, h: float, rng: np.random.Generator, solver: str = "rk4"
) -> StepOutcome:
    return _single(gm_ode_batch, problem, _as_batch(x_n, problem.d), h, rng, solver=solver)


def gm_var_step(
    problem: SdeProblem,
    x_n,
    h: float,
    rng: np.random.Generator,
    solver: str = "rk4",
    include_cubic: bool = True,
    fd_step: Optional[float] = None,
) -> StepOutcome:
    return _single(
        gm_var_batch,
        problem,
        _as_batch(x_n, problem.d),
        h,
        rng,
        solver=solver,
        include_cubic=include_cubic,
        fd_step=fd_step,
    )


BATCH_KERNELS = {
    "em": em_batch,
    "gm-ode": gm_ode_batch,
    "gm-var": gm_var_batch,
}
