"""One-macro-step integration of the beam mean and covariance ODEs
  m' = b(m),   S' = G(m(t)), S(0) = 0
over [0, h].

A single fixed-step Runge-Kutta macro step is taken deliberately: the
scheme's cost model is one ODE step per SDE step, and the mean and
covariance share RK stages because S's integrand is evaluated along m(t).
Only the upper triangle of S is integrated and then mirrored, so the
output is symmetric bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import SdeProblem

__all__ = ["GaussianState", "integrate_mean", "integrate_cov", "SOLVERS"]

SOLVERS = ("rk2", "rk4")


@dataclass(frozen=True)
class GaussianState:
    """Mean vector and symmetric covariance of one evolved beam."""

    mean: np.ndarray
    cov: np.ndarray


def _check_solver(solver: str) -> None:
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}; choose from {SOLVERS}")


def _check_finite(y: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(y)):
        raise ValueError(f"{what} produced non-finite values")


def integrate_mean(problem: SdeProblem, m0: np.ndarray, h: float, solver: str = "rk4") -> np.ndarray:
    """One macro RK step for m' = b(m) from m0 over [0, h].

    ``m0`` may carry a leading batch axis: (..., d) in, (..., d) out.
    """
    _check_solver(solver)
    if h <= 0.0:
        raise ValueError("h must be positive")
    m0 = np.asarray(m0, dtype=float)
    b = problem.drift
    if solver == "rk2":  # Heun
        k1 = b(m0)
        k2 = b(m0 + h * k1)
        out = m0 + 0.5 * h * (k1 + k2)
    else:
        k1 = b(m0)
        k2 = b(m0 + 0.5 * h * k1)
        k3 = b(m0 + 0.5 * h * k2)
        k4 = b(m0 + h * k3)
        out = m0 + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _check_finite(out, "drift flow")
    return out


def integrate_cov(
    problem: SdeProblem,
    m0: np.ndarray,
    h: float,
    rate: Callable[[np.ndarray], np.ndarray],
    solver: str = "rk4",
) -> GaussianState:
    """Jointly advance (m, S) over one macro RK step, sharing stages.

    ``rate`` maps states (..., d) to symmetric matrices (..., d, d).
    The returned covariance is symmetric by construction and may be
    indefinite; the caller decides how to repair that.
    """
    _check_solver(solver)
    if h <= 0.0:
        raise ValueError("h must be positive")
    m0 = np.asarray(m0, dtype=float)
    d = m0.shape[-1]
    iu = np.triu_indices(d)
    b = problem.drift

    def g_packed(x):
        return rate(x)[..., iu[0], iu[1]]

    if solver == "rk2":
        k1 = b(m0)
        g1 = g_packed(m0)
        m1 = m0 + h * k1
        k2 = b(m1)
        g2 = g_packed(m1)
        mean = m0 + 0.5 * h * (k1 + k2)
        s_packed = 0.5 * h * (g1 + g2)
    else:
        k1 = b(m0)
        g1 = g_packed(m0)
        y2 = m0 + 0.5 * h * k1
        k2 = b(y2)
        g2 = g_packed(y2)
        y3 = m0 + 0.5 * h * k2
        k3 = b(y3)
        g3 = g_packed(y3)
        y4 = m0 + h * k3
        k4 = b(y4)
        g4 = g_packed(y4)
        mean = m0 + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        s_packed = (h / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)

    _check_finite(mean, "drift flow")
    _check_finite(s_packed, "covariance flow")

    cov = np.zeros(m0.shape[:-1] + (d, d))
    cov[..., iu[0], iu[1]] = s_packed
    cov[..., iu[1], iu[0]] = s_packed
    return GaussianState(mean=mean, cov=cov)
