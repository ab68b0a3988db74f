"""Weak second-order SDE integration via Gaussian-mixture transition
kernels, with a Monte Carlo study harness and a numerical verification
suite for the underlying order conditions.
"""

from .flow import GaussianState, integrate_cov, integrate_mean
from .linalg import SymEig, psd_clip, sqrt_factor, sym_eig
from .mc import (
    ErrorReport,
    fit_order,
    one_step_moments,
    run_weak_error,
    sample_states,
    second_moment_bound,
)
from .mixture import GAMMA, W0, W1, beam_center, enumerate_beams, sample_z
from .model import BUILTIN_NAMES, MomentOracle, SdeProblem, builtin_problem, lambda_at
from .schemes import (
    BatchDiagnostics,
    SCHEME_NAMES,
    StepOutcome,
    em_step,
    gm_ode_step,
    gm_var_step,
    make_stream,
)

__all__ = [
    "BUILTIN_NAMES",
    "BatchDiagnostics",
    "ErrorReport",
    "GAMMA",
    "GaussianState",
    "MomentOracle",
    "SCHEME_NAMES",
    "SdeProblem",
    "StepOutcome",
    "SymEig",
    "W0",
    "W1",
    "beam_center",
    "builtin_problem",
    "em_step",
    "enumerate_beams",
    "fit_order",
    "gm_ode_step",
    "gm_var_step",
    "integrate_cov",
    "integrate_mean",
    "lambda_at",
    "make_stream",
    "one_step_moments",
    "psd_clip",
    "run_weak_error",
    "sample_states",
    "sample_z",
    "second_moment_bound",
    "sqrt_factor",
    "sym_eig",
]
