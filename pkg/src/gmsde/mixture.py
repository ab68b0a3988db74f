"""Ingredients of the Gaussian-mixture transition step.

A step picks one of 3^d mixture components ("beams") by sampling a
three-point variable per eigen-direction of Lambda(x_n); only the sampled
component is ever materialized, so the per-step cost is linear in d.
Exhaustive beam enumeration lives here too, but is only used by the
verification tooling for small d.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterator, Tuple

import numpy as np

from .linalg import SymEig
from .model import SdeProblem, lambda_at

__all__ = [
    "MixtureParams",
    "BeamDraw",
    "sample_z",
    "z_from_uniform",
    "beam_center",
    "covariance_rate",
    "enumerate_beams",
    "GAMMA",
    "W0",
    "W1",
]

# the unique choice (for this symmetric 3-point ansatz) satisfying the
# second-order moment constraints
GAMMA = 1.5
W0 = 2.0 / 3.0
W1 = 1.0 / 6.0


@dataclass(frozen=True)
class MixtureParams:
    gamma: float = GAMMA
    w0: float = W0
    w1: float = W1

    def __post_init__(self):
        if self.w0 + 2.0 * self.w1 != 1.0:
            raise ValueError("weights must satisfy w0 + 2 w1 = 1")
        if self.gamma * 2.0 * self.w1 != 0.5:
            raise ValueError("variance split requires gamma * 2 w1 = 1/2")


@dataclass(frozen=True)
class BeamDraw:
    """The sampled beam for one step: offsets z, initial center, and the
    eigendecomposition of Lambda(x_n) it was built from."""

    z: np.ndarray
    center0: np.ndarray
    eig: SymEig


def z_from_uniform(u: np.ndarray) -> np.ndarray:
    """Map uniforms in [0,1) to the three-point law:
    u < 1/6 -> -1,  1/6 <= u < 1/3 -> +1,  else 0."""
    u = np.asarray(u)
    return np.where(u < 1.0 / 6.0, -1, np.where(u < 1.0 / 3.0, 1, 0)).astype(np.int64)


def sample_z(rng: np.random.Generator, d: int) -> np.ndarray:
    """Draw the per-direction offsets z in {-1,0,+1}^d, i.i.d. with
    P(0) = 2/3 and P(+-1) = 1/6, one uniform per component."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return z_from_uniform(rng.random(d))


def beam_center(x_n: np.ndarray, z: np.ndarray, eig: SymEig, h: float) -> np.ndarray:
    """Initial beam center  x_n + sum_i z_i sqrt(gamma lambda_i h) v_i.

    Negative eigenvalues (possible at degenerate points of Lambda, up to
    roundoff) are clamped to zero before the square root.
    """
    x_n = np.asarray(x_n, dtype=float)
    if h <= 0.0:
        raise ValueError("h must be positive")
    if not np.all(np.isfinite(x_n)):
        raise ValueError("state contains non-finite entries")
    lam_plus = np.maximum(eig.eigenvalues, 0.0)
    return x_n + eig.eigenvectors @ (np.asarray(z, dtype=float) * np.sqrt(GAMMA * lam_plus * h))


def covariance_rate(problem: SdeProblem, x_n: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """The covariance rate G(x) = Lambda(x) - Lambda(x_n)/2 with the
    anchor frozen at x_n, so G(x_n) = Lambda(x_n)/2 exactly."""
    half_anchor = 0.5 * lambda_at(problem, x_n)

    def rate(x: np.ndarray) -> np.ndarray:
        return problem.lam(np.asarray(x, dtype=float)) - half_anchor

    return rate


def enumerate_beams(d: int) -> Iterator[Tuple[np.ndarray, float]]:
    """Yield (z, weight) for all 3^d beams; weights multiply per
    component with w^0 = 2/3 and w^{+-1} = 1/6.  Verification use only;
    cost is exponential in d."""
    if d > 8:
        raise ValueError("exhaustive enumeration is limited to d <= 8")
    for zs in itertools.product((-1, 0, 1), repeat=d):
        z = np.array(zs, dtype=np.int64)
        w = W0 ** int(np.sum(z == 0)) * W1 ** int(np.sum(z != 0))
        yield z, w
