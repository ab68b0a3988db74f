"""Monte Carlo harness: weak-error estimation with sliced error bars,
order fitting, one-step shape diagnostics, and the second-moment
efficiency bound.

Trajectories are simulated in fixed-size chunks, each driven by its own
counter-based stream keyed by (seed, global chunk index).  A chunk's
contribution is a pure function of that key, and chunks are reduced in
index order, so results are bit-identical for any worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from multiprocessing import get_context
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import _kernels, schemes
from .model import SdeProblem
from .schemes import BatchDiagnostics, make_stream

__all__ = [
    "ErrorReport",
    "run_weak_error",
    "fit_order",
    "one_step_moments",
    "second_moment_bound",
    "sample_states",
    "CHUNK_SIZE",
    "CI_MULTIPLIER",
]

# trajectories per stream; fixed so the (seed, chunk) -> result mapping
# never depends on worker count or total sample size
CHUNK_SIZE = 100_000

# ~90% one-sided normal quantile, deliberately not configurable
CI_MULTIPLIER = 1.65


@dataclass(frozen=True)
class ErrorReport:
    """Weak-error estimate at one step size, with sliced error bars.

    ``slice_errors`` are the relative errors of ``slices`` contiguous
    equal blocks of trajectories; ``sigma_E`` is their sample standard
    deviation and ``ci`` the relative error +- 1.65 sigma_E.
    """

    h: float
    samples: int
    estimate: float
    oracle: float
    relative_error: float
    slice_estimates: Tuple[float, ...]
    slice_errors: Tuple[float, ...]
    sigma_E: float
    ci: Tuple[float, float]
    excluded: int
    diagnostics: BatchDiagnostics


def _step_count(T: float, h: float) -> int:
    r = T / h
    n = int(round(r))
    if n < 1 or abs(n * h - T) > 2.0 * np.spacing(float(T)):
        raise ValueError(f"h={h!r} does not divide the horizon T={T!r} into whole steps")
    return n


def _check_scheme_solver(scheme: str, solver: str) -> None:
    if scheme not in schemes.SCHEME_NAMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {schemes.SCHEME_NAMES}")
    if solver not in ("rk2", "rk4"):
        raise ValueError(f"unknown solver {solver!r}; choose from ('rk2', 'rk4')")


def _advance_chunk(
    problem: SdeProblem,
    scheme: str,
    solver: str,
    x: np.ndarray,
    h: float,
    n_steps: int,
    rng: np.random.Generator,
    kernel,
    diag: BatchDiagnostics,
) -> Tuple[np.ndarray, np.ndarray]:
    """Step a chunk in place for n_steps; returns (states, excluded mask).

    Trajectories that turn non-finite are excluded and their row reset to
    x0 so the batch stays numerically clean; the per-step draw counts
    never depend on exclusions, keeping streams aligned.
    """
    n, d = x.shape
    excluded = np.zeros(n, dtype=bool)
    counters = np.zeros(_kernels.N_COUNTERS, dtype=np.int64)
    for _ in range(n_steps):
        if scheme == "em":
            draws = rng.standard_normal((n, problem.m))
            x, dstep = schemes.em_batch(problem, x, h, None, draws=draws, strict=False)
            diag.merge(dstep)
        else:
            u = rng.random((n, d))
            xi = rng.standard_normal((n, d))
            if kernel is not None:
                kernel(x, h, u, xi, counters)
                diag.n += n
            elif scheme == "gm-ode":
                x, dstep = schemes.gm_ode_batch(
                    problem, x, h, None, solver=solver, draws=(u, xi), strict=False
                )
                diag.merge(dstep)
            else:
                x, dstep = schemes.gm_var_batch(
                    problem, x, h, None, solver=solver, draws=(u, xi), strict=False
                )
                diag.merge(dstep)
        bad = ~np.all(np.isfinite(x), axis=1)
        if bad.any():
            excluded |= bad
            x[bad] = problem.x0
    diag.deterministic_fallback += int(counters[0])
    diag.negative_variance += int(counters[1])
    diag.clipped_eigs += int(counters[2])
    return x, excluded


# worker context; populated before the pool forks, inherited by workers
_WORK: dict = {}


def _chunk_task(args: Tuple[int, int]):
    gid, count = args
    w = _WORK
    problem: SdeProblem = w["problem"]
    rng = make_stream(w["seed"], gid)
    x = np.tile(np.asarray(problem.x0, dtype=float), (count, 1))
    diag = BatchDiagnostics()
    x, excluded = _advance_chunk(
        problem, w["scheme"], w["solver"], x, w["h"], w["n_steps"], rng, w["kernel"], diag
    )
    vals = problem.oracle.test_function(x)
    ok = ~excluded & np.isfinite(vals)
    return float(np.sum(vals[ok])), int(np.sum(ok)), int(count - np.sum(ok)), diag


def _map_tasks(tasks, threads: int):
    if threads <= 1 or len(tasks) <= 1:
        return [_chunk_task(t) for t in tasks]
    ctx = get_context("fork")
    with ctx.Pool(min(threads, len(tasks))) as pool:
        return pool.map(_chunk_task, tasks)


def run_weak_error(
    problem: SdeProblem,
    scheme: str,
    h: float,
    T: Optional[float] = None,
    samples: int = 1_000_000,
    slices: int = 10,
    seed: int = 0,
    threads: int = 1,
    solver: str = "rk4",
) -> ErrorReport:
    """Estimate E = |mean phi(X^n) - oracle| / |oracle| over ``samples``
    trajectories of ``T/h`` steps, with error bars from ``slices``
    contiguous sample blocks."""
    _check_scheme_solver(scheme, solver)
    if problem.oracle is None:
        raise ValueError("problem has no moment oracle; weak error is undefined")
    if samples < 1 or slices < 1 or samples % slices != 0:
        raise ValueError("samples must be a positive multiple of slices")
    T = problem.T if T is None else float(T)
    n_steps = _step_count(T, h)

    per_slice = samples // slices
    chunks_per_slice = math.ceil(per_slice / CHUNK_SIZE)
    tasks = []
    for j in range(slices):
        left = per_slice
        for c in range(chunks_per_slice):
            count = min(CHUNK_SIZE, left)
            left -= count
            tasks.append((j * chunks_per_slice + c, count))

    kernel = _kernels.get_fast_kernel(problem, scheme, solver)
    if kernel is not None:
        _kernels.warm_up(kernel, problem.d)  # compile before forking

    _WORK.update(
        problem=problem,
        scheme=scheme,
        solver=solver,
        h=float(h),
        n_steps=n_steps,
        seed=int(seed),
        kernel=kernel,
    )
    results = _map_tasks(tasks, threads)

    oracle_val = float(
        problem.oracle.exact_expectation(np.asarray(problem.x0, dtype=float), T, problem.params)
    )
    if oracle_val == 0.0:
        raise ValueError("oracle expectation is zero; relative error is undefined")

    diag = BatchDiagnostics()
    excluded = 0
    slice_sums = np.zeros(slices)
    slice_counts = np.zeros(slices, dtype=np.int64)
    for (j_c, _), (s, cnt, excl, dg) in zip(tasks, results):
        j = j_c // chunks_per_slice
        slice_sums[j] += s
        slice_counts[j] += cnt
        excluded += excl
        diag.merge(dg)

    if np.any(slice_counts == 0):
        raise FloatingPointError("a slice lost all its trajectories to exclusions")
    estimate = float(np.sum(slice_sums) / np.sum(slice_counts))
    rel = abs(estimate - oracle_val) / abs(oracle_val)
    slice_estimates = tuple(float(s / c) for s, c in zip(slice_sums, slice_counts))
    slice_errors = tuple(abs(e - oracle_val) / abs(oracle_val) for e in slice_estimates)
    sigma = float(np.std(slice_errors, ddof=1)) if slices > 1 else 0.0
    return ErrorReport(
        h=float(h),
        samples=samples,
        estimate=estimate,
        oracle=oracle_val,
        relative_error=rel,
        slice_estimates=slice_estimates,
        slice_errors=slice_errors,
        sigma_E=sigma,
        ci=(rel - CI_MULTIPLIER * sigma, rel + CI_MULTIPLIER * sigma),
        excluded=excluded,
        diagnostics=diag,
    )


def fit_order(reports: Sequence[ErrorReport]) -> Tuple[float, float, float]:
    """Least-squares fit of log E against log h.

    Returns (slope, intercept, residual) with residual the sum of squared
    log-space deviations from the fit.
    """
    if len(reports) < 3:
        raise ValueError("need at least 3 reports to fit an order")
    hs = np.array([r.h for r in reports], dtype=float)
    if len(np.unique(hs)) != len(hs):
        raise ValueError("step sizes must be distinct")
    es = np.array([r.relative_error for r in reports], dtype=float)
    if np.any(es <= 0.0):
        raise ValueError("a report has zero error; increase samples to resolve it")
    lx, ly = np.log(hs), np.log(es)
    design = np.stack([lx, np.ones_like(lx)], axis=1)
    coef, *_ = np.linalg.lstsq(design, ly, rcond=None)
    resid = float(np.sum((design @ coef - ly) ** 2))
    return float(coef[0]), float(coef[1]), resid


def sample_states(
    problem: SdeProblem,
    scheme: str,
    h: float,
    n_steps: int,
    samples: int,
    seed: int = 0,
    x0=None,
    solver: str = "rk4",
) -> Tuple[np.ndarray, BatchDiagnostics]:
    """Simulate ``samples`` trajectories for ``n_steps`` steps of size h
    and return the final states (samples, d).  Deterministic in (seed,
    samples); raises on non-finite trajectories."""
    _check_scheme_solver(scheme, solver)
    x0 = np.asarray(problem.x0 if x0 is None else x0, dtype=float).reshape(problem.d)
    kernel = _kernels.get_fast_kernel(problem, scheme, solver)
    if kernel is not None:
        _kernels.warm_up(kernel, problem.d)
    out = np.empty((samples, problem.d))
    diag = BatchDiagnostics()
    done = 0
    gid = 0
    while done < samples:
        count = min(CHUNK_SIZE, samples - done)
        rng = make_stream(seed, gid)
        x = np.tile(x0, (count, 1))
        x, excluded = _advance_chunk(problem, scheme, solver, x, h, n_steps, rng, kernel, diag)
        if excluded.any():
            raise FloatingPointError("simulation produced non-finite states")
        out[done : done + count] = x
        done += count
        gid += 1
    return out, diag


def _one_step_states(
    problem: SdeProblem,
    scheme: str,
    x0: np.ndarray,
    h: float,
    samples: int,
    seed: int,
    solver: str,
) -> Tuple[np.ndarray, BatchDiagnostics]:
    return sample_states(problem, scheme, h, 1, samples, seed=seed, x0=x0, solver=solver)


def one_step_moments(
    problem: SdeProblem,
    scheme: str,
    x0=None,
    h: float = 1.0 / 32.0,
    samples: int = 100_000,
    seed: int = 0,
    solver: str = "rk4",
) -> Dict[str, float]:
    """Mean, variance, and standardized skewness/kurtosis of the one-step
    transition distribution (1D problems)."""
    _check_scheme_solver(scheme, solver)
    if problem.d != 1:
        raise ValueError("one-step shape diagnostics are defined for 1D problems")
    if samples < 10_000:
        raise ValueError("need at least 1e4 samples for stable shape estimates")
    x0 = np.asarray(problem.x0 if x0 is None else x0, dtype=float).reshape(1)
    states, _ = _one_step_states(problem, scheme, x0, h, samples, seed, solver)
    v = states[:, 0]
    mean = float(np.mean(v))
    var = float(np.var(v))
    if var == 0.0:
        raise ValueError("degenerate one-step distribution (zero variance)")
    std = math.sqrt(var)
    zs = (v - mean) / std
    return {
        "mean": mean,
        "variance": var,
        "skewness": float(np.mean(zs ** 3)),
        "kurtosis": float(np.mean(zs ** 4)),
    }


def second_moment_bound(
    problem: SdeProblem,
    scheme: str,
    x0=None,
    h: float = 1.0 / 64.0,
    samples: int = 100_000,
    seed: int = 0,
    solver: str = "rk4",
) -> Dict[str, float]:
    """Empirical one-step displacement moment M2 = E||X^1 - x0||^2
    against the efficiency bound 4 * (local trace-norm bound) * h.

    The trace-norm bound is evaluated on the axis-aligned box spanned by
    x0 and the sampled one-step states.
    """
    _check_scheme_solver(scheme, solver)
    if problem.trace_bound is None:
        raise ValueError("problem has no trace-norm bound")
    x0 = np.asarray(problem.x0 if x0 is None else x0, dtype=float).reshape(problem.d)
    states, _ = _one_step_states(problem, scheme, x0, h, samples, seed, solver)
    r2 = np.sum((states - x0) ** 2, axis=1)
    m2 = float(np.mean(r2))
    mc_sigma = float(np.std(r2) / math.sqrt(samples))
    lo = np.minimum(states.min(axis=0), x0)
    hi = np.maximum(states.max(axis=0), x0)
    bound = float(problem.trace_bound(lo, hi))
    return {
        "M2_hat": m2,
        "bound": bound,
        "mc_sigma": mc_sigma,
        "holds": bool(m2 <= 4.0 * bound * h + 4.0 * mc_sigma),
    }
