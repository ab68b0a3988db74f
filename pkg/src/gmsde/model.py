"""SDE problem definitions and closed-form moment oracles.

A problem is a drift ``b`` and a diffusion factor ``sigma`` supplied as
vectorized callables; the local covariance rate ``Lambda = sigma sigma^T``
is derived.  Four builtin problems ship with closed-form second-moment
oracles so weak errors can be measured without a reference simulation.

Coefficients here are unbounded; the theory's boundedness assumption is a
proof device, not a runtime contract, and the library does not enforce it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "SdeProblem",
    "MomentOracle",
    "lambda_at",
    "builtin_problem",
    "BUILTIN_NAMES",
]


@dataclass(frozen=True)
class MomentOracle:
    """A named polynomial test function with its exact expectation.

    ``exact_expectation(x0, T, params)`` returns E[phi(X(T))] for the
    problem started at ``x0``; it is pure and deterministic.
    """

    label: str
    test_function: Callable[[np.ndarray], np.ndarray]
    exact_expectation: Callable[[np.ndarray, float, dict], float]


@dataclass(frozen=True)
class SdeProblem:
    """An autonomous Ito SDE  dX = b(X) dt + sigma(X) dW.

    ``drift`` maps (..., d) -> (..., d) and ``diffusion`` maps
    (..., d) -> (..., d, m); both must accept a leading batch axis.
    Instances are immutable and safe to share across workers.
    """

    name: str
    d: int
    m: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    params: dict = field(default_factory=dict)
    x0: Optional[np.ndarray] = None
    T: float = 1.0
    oracle: Optional[MomentOracle] = None
    # sup of tr(Lambda(x)) over the box [lo, hi]; used by the
    # second-moment efficiency bound.
    trace_bound: Optional[Callable[[np.ndarray, np.ndarray], float]] = None
    # polynomial forms of b and Lambda (dicts {exponent tuple: coeff}),
    # present when the coefficients are polynomials; the verification
    # module needs them to apply the generator exactly.
    b_poly: Optional[tuple] = None
    lam_poly: Optional[tuple] = None

    def lam(self, x: np.ndarray) -> np.ndarray:
        """Diffusion matrix Lambda(x) = sigma(x) sigma(x)^T, (..., d, d)."""
        s = self.diffusion(np.asarray(x, dtype=float))
        out = s @ np.swapaxes(s, -1, -2)
        # sigma sigma^T is symmetric up to rounding; make it exact
        return 0.5 * (out + np.swapaxes(out, -1, -2))


def lambda_at(problem: SdeProblem, x) -> np.ndarray:
    """Evaluate Lambda(x) at a single state vector, returning (d, d)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape != (problem.d,):
        raise ValueError(
            f"state has shape {x.shape}, expected ({problem.d},) for problem {problem.name!r}"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("state contains non-finite entries")
    return problem.lam(x[None, :])[0]


# ---------------------------------------------------------------------------
# builtin problems


def _phi_square(x: np.ndarray) -> np.ndarray:
    return x[..., 0] ** 2


def _quad1d(lam_: float, x0: float, T: float) -> SdeProblem:
    # dX = lam X dt + sqrt(X^2 + 4) dW

    def drift(x):
        return lam_ * x

    def diffusion(x):
        return np.sqrt(x[..., 0] ** 2 + 4.0)[..., None, None]

    def exact(x0_, T_, p):
        a = 2.0 * p["lam"] + 1.0
        e = math.exp(a * T_)
        return float(x0_[0] ** 2 * e + 4.0 * (e - 1.0) / a)

    def tr_bound(lo, hi):
        return max(lo[0] ** 2, hi[0] ** 2) + 4.0

    return SdeProblem(
        name="quad1d",
        d=1,
        m=1,
        drift=drift,
        diffusion=diffusion,
        params={"lam": lam_},
        x0=np.array([x0]),
        T=T,
        oracle=MomentOracle("x^2", _phi_square, exact),
        trace_bound=tr_bound,
        b_poly=({(1,): lam_},),
        lam_poly=((({(2,): 1.0, (0,): 4.0}),),),
    )


def _gbm(lam_: float, sig: float, x0: float, T: float) -> SdeProblem:
    # dX = lam X dt + sig X dW (degenerate diffusion at x = 0)

    def drift(x):
        return lam_ * x

    def diffusion(x):
        return sig * x[..., None]

    def exact(x0_, T_, p):
        return float(x0_[0] ** 2 * math.exp((2.0 * p["lam"] + p["sig"] ** 2) * T_))

    def tr_bound(lo, hi):
        return sig ** 2 * max(lo[0] ** 2, hi[0] ** 2)

    return SdeProblem(
        name="gbm",
        d=1,
        m=1,
        drift=drift,
        diffusion=diffusion,
        params={"lam": lam_, "sig": sig},
        x0=np.array([x0]),
        T=T,
        oracle=MomentOracle("x^2", _phi_square, exact),
        trace_bound=tr_bound,
        b_poly=({(1,): lam_},),
        lam_poly=((({(2,): sig ** 2}),),),
    )


def _rot2d(sig: float, x0: np.ndarray, T: float) -> SdeProblem:
    # dX1 = X1 dt + sig dW2;  dX2 = -X2 dt + X1 dW1 + sig dW2

    def drift(x):
        return np.stack([x[..., 0], -x[..., 1]], axis=-1)

    def diffusion(x):
        n = x.shape[:-1]
        s = np.zeros(n + (2, 2))
        s[..., 0, 1] = sig
        s[..., 1, 0] = x[..., 0]
        s[..., 1, 1] = sig
        return s

    def phi(x):
        return x[..., 1] ** 2

    def exact(x0_, T_, p):
        s2 = p["sig"] ** 2
        x1sq, x2sq = x0_[0] ** 2, x0_[1] ** 2
        return float(
            math.exp(-2.0 * T_) * (x2sq - 0.25 * x1sq - 3.0 * s2 / 8.0)
            + s2 / 4.0
            + math.exp(2.0 * T_) * (0.25 * x1sq + s2 / 8.0)
        )

    def tr_bound(lo, hi):
        # tr Lambda = x1^2 + 2 sig^2
        return max(lo[0] ** 2, hi[0] ** 2) + 2.0 * sig ** 2

    s2 = sig ** 2
    return SdeProblem(
        name="rot2d",
        d=2,
        m=2,
        drift=drift,
        diffusion=diffusion,
        params={"sig": sig},
        x0=np.asarray(x0, dtype=float),
        T=T,
        oracle=MomentOracle("x2^2", phi, exact),
        trace_bound=tr_bound,
        b_poly=({(1, 0): 1.0}, {(0, 1): -1.0}),
        lam_poly=(
            ({(0, 0): s2}, {(0, 0): s2}),
            ({(0, 0): s2}, {(2, 0): 1.0, (0, 0): s2}),
        ),
    )


_RING_DRIFT = np.array(
    [
        [-1, 1, 0, 0, 0, -1],
        [-1, -1, 1, 0, 0, 0],
        [0, -1, -1, 1, 0, 0],
        [0, 0, -1, -1, 1, 0],
        [0, 0, 0, -1, -1, 1],
        [1, 0, 0, 0, -1, -1],
    ],
    dtype=float,
)

_RING_OFF = np.zeros((6, 6))
for _i in range(6):
    _RING_OFF[_i, (_i + 1) % 6] = -0.1
    _RING_OFF[_i, (_i - 1) % 6] = -0.1
del _i


def _ring6d(sig: float, x0: np.ndarray, T: float) -> SdeProblem:
    # 6D system with a rotation-plus-contraction drift and a banded
    # state-dependent diffusion factor; tr Lambda = sig^2 (2.22 + |x|^2).

    def drift(x):
        return x @ _RING_DRIFT.T

    def diffusion(x):
        n = x.shape[:-1]
        s = np.broadcast_to(_RING_OFF, n + (6, 6)).copy()
        idx = np.arange(6)
        s[..., idx, idx] = np.sqrt(0.1 * (idx + 1) + x ** 2)
        return sig * s

    def phi(x):
        return np.sum(x ** 2, axis=-1)

    def exact(x0_, T_, p):
        s2 = p["sig"] ** 2
        e = math.exp((s2 - 2.0) * T_)
        return float(np.sum(x0_ ** 2) * e + 2.22 * s2 / (s2 - 2.0) * (e - 1.0))

    def tr_bound(lo, hi):
        r2 = float(np.sum(np.maximum(lo ** 2, hi ** 2)))
        return sig ** 2 * (2.22 + r2)

    return SdeProblem(
        name="ring6d",
        d=6,
        m=6,
        drift=drift,
        diffusion=diffusion,
        params={"sig": sig},
        x0=np.asarray(x0, dtype=float),
        T=T,
        oracle=MomentOracle("sum x_i^2", phi, exact),
        trace_bound=tr_bound,
    )


BUILTIN_NAMES = ("quad1d", "gbm", "rot2d", "ring6d")


def builtin_problem(name: str, **overrides) -> SdeProblem:
    """Construct a builtin problem with paper defaults, overridable.

    Recognized overrides: ``lam``, ``sig`` (coefficients), ``x0``
    (scalar or sequence), ``T`` (horizon).
    """
    known = {"lam", "sig", "x0", "T"}
    bad = set(overrides) - known
    if bad:
        raise ValueError(f"unknown parameter(s) {sorted(bad)}; expected {sorted(known)}")

    def arr(v, n):
        a = np.atleast_1d(np.asarray(v, dtype=float))
        if a.size == 1 and n > 1:
            a = np.full(n, a[0])
        if a.shape != (n,):
            raise ValueError(f"x0 must have length {n}")
        return a

    if name == "quad1d":
        return _quad1d(
            float(overrides.get("lam", -2.0)),
            float(np.atleast_1d(overrides.get("x0", 2.0))[0]),
            float(overrides.get("T", 2.0)),
        )
    if name == "gbm":
        return _gbm(
            float(overrides.get("lam", -0.8)),
            float(overrides.get("sig", 0.85)),
            float(np.atleast_1d(overrides.get("x0", 5.0))[0]),
            float(overrides.get("T", 1.0)),
        )
    if name == "rot2d":
        return _rot2d(
            float(overrides.get("sig", 0.1)),
            arr(overrides.get("x0", (1.0, 1.0)), 2),
            float(overrides.get("T", 1.0)),
        )
    if name == "ring6d":
        return _ring6d(
            float(overrides.get("sig", 0.7)),
            arr(overrides.get("x0", np.ones(6)), 6),
            float(overrides.get("T", 2.0)),
        )
    raise ValueError(f"unknown builtin problem {name!r}; choose from {BUILTIN_NAMES}")
