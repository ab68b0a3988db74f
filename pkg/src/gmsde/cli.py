"""Command-line front end: convergence studies, one-step histograms and
moments, and the numerical verification suite.

Output is CSV plus plain-text summaries; plotting is left to external
tools.  Exit codes: 0 success, 2 usage error, 3 numerical failure,
4 verification failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import mc, mixture, model, schemes, verify

__all__ = ["main", "RunConfig", "EXIT_OK", "EXIT_USAGE", "EXIT_NUMERICAL", "EXIT_VERIFY"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_VERIFY = 4

CSV_HEADER = "h,N,estimate,oracle,rel_error,sigma_E,ci_lo,ci_hi"


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    problem: str = "quad1d"
    scheme: str = "gm-ode"
    solver: str = "rk4"
    h_list: List[float] = field(default_factory=lambda: [1 / 4, 1 / 8, 1 / 16, 1 / 32])
    T: Optional[float] = None
    samples: int = 100_000
    slices: int = 10
    seed: int = 0
    threads: int = 1
    out: Optional[str] = None
    bins: int = 50
    params: dict = field(default_factory=dict)


def _parse_real(s: str) -> float:
    """Accept plain floats and fractions like 1/12 (grid steps are most
    naturally written that way)."""
    s = s.strip()
    if "/" in s:
        num, den = s.split("/", 1)
        return float(num) / float(den)
    return float(s)


def _parse_h_list(s: str) -> List[float]:
    vals = [_parse_real(tok) for tok in s.split(",") if tok.strip()]
    if not vals or any(not (v > 0.0) for v in vals):
        raise UsageError(f"invalid step list {s!r}")
    return vals


def _parse_param(tok: str) -> tuple:
    if "=" not in tok:
        raise UsageError(f"--param expects k=v, got {tok!r}")
    k, v = tok.split("=", 1)
    k = k.strip()
    parts = [p for p in v.split(",") if p.strip()]
    try:
        vals = [_parse_real(p) for p in parts]
    except ValueError as e:
        raise UsageError(f"invalid value for parameter {k!r}: {v!r}") from e
    return k, vals[0] if len(vals) == 1 else vals


def _read_config_file(path: str) -> dict:
    out: dict = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise UsageError(f"cannot read config file {path!r}: {e}") from e
    for ln, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected key=value, got {line!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key == "param":
            out.setdefault("param", []).append(val)
        else:
            out[key] = val
    return out


def _build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    env_threads = os.environ.get("SDE_THREADS")
    if env_threads is not None:
        try:
            cfg.threads = int(env_threads)
        except ValueError as e:
            raise UsageError(f"SDE_THREADS must be an integer, got {env_threads!r}") from e

    file_vals = _read_config_file(args.config) if getattr(args, "config", None) else {}

    def setting(name, flag_val, conv):
        if flag_val is not None:
            return conv(flag_val)
        if name in file_vals:
            return conv(file_vals[name])
        return getattr(cfg, name if name != "h" else "h_list")

    cfg.problem = setting("problem", args.problem, str)
    cfg.scheme = setting("scheme", args.scheme, str)
    cfg.solver = setting("solver", args.solver, str)
    cfg.h_list = setting("h", args.h, _parse_h_list)
    t_val = args.T if args.T is not None else file_vals.get("T")
    cfg.T = _parse_real(str(t_val)) if t_val is not None else None
    cfg.samples = setting("samples", args.samples, int)
    cfg.slices = setting("slices", args.slices, int)
    cfg.seed = setting("seed", args.seed, int)
    cfg.threads = setting("threads", args.threads, int)
    out_val = args.out if args.out is not None else file_vals.get("out")
    cfg.out = str(out_val) if out_val is not None else None
    if hasattr(args, "bins"):
        cfg.bins = setting("bins", args.bins, int)

    param_tokens = list(file_vals.get("param", []))
    if getattr(args, "param", None):
        param_tokens.extend(args.param)
    for tok in param_tokens:
        k, v = _parse_param(tok)
        cfg.params[k] = v

    if cfg.scheme not in schemes.SCHEME_NAMES:
        raise UsageError(f"unknown scheme {cfg.scheme!r}; choose from {schemes.SCHEME_NAMES}")
    if cfg.solver not in ("rk2", "rk4"):
        raise UsageError(f"unknown solver {cfg.solver!r}; choose from ('rk2', 'rk4')")
    if cfg.samples < 1 or cfg.slices < 1 or cfg.samples % cfg.slices != 0:
        raise UsageError(
            f"samples ({cfg.samples}) must be a positive multiple of slices ({cfg.slices})"
        )
    if cfg.threads < 1:
        raise UsageError("threads must be >= 1")
    return cfg


def _make_problem(cfg: RunConfig):
    overrides = dict(cfg.params)
    if cfg.T is not None:
        overrides["T"] = cfg.T
    try:
        return model.builtin_problem(cfg.problem, **overrides)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _emit(text: str, out: Optional[str]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="") as f:
            f.write(text)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# commands


def cmd_converge(cfg: RunConfig) -> int:
    problem = _make_problem(cfg)
    reports = []
    for h in cfg.h_list:
        reports.append(
            mc.run_weak_error(
                problem,
                cfg.scheme,
                h,
                T=cfg.T,
                samples=cfg.samples,
                slices=cfg.slices,
                seed=cfg.seed,
                threads=cfg.threads,
                solver=cfg.solver,
            )
        )
    lines = [CSV_HEADER]
    for r in reports:
        lines.append(
            ",".join(
                [
                    _fmt(r.h),
                    str(r.samples),
                    _fmt(r.estimate),
                    _fmt(r.oracle),
                    _fmt(r.relative_error),
                    _fmt(r.sigma_E),
                    _fmt(r.ci[0]),
                    _fmt(r.ci[1]),
                ]
            )
        )
    _emit("\n".join(lines) + "\n", cfg.out)

    excluded = sum(r.excluded for r in reports)
    if excluded:
        print(f"warning: {excluded} trajectories excluded as non-finite", file=sys.stderr)
    if len(reports) >= 3:
        slope, intercept, resid = mc.fit_order(reports)
        ly = np.log([r.relative_error for r in reports])
        ss_tot = float(np.sum((ly - ly.mean()) ** 2))
        r2 = 1.0 if ss_tot == 0.0 else 1.0 - resid / ss_tot
        print(f"order = {slope:.4f} (r2 = {r2:.4f})")
    return EXIT_OK


def cmd_hist(cfg: RunConfig) -> int:
    problem = _make_problem(cfg)
    if problem.d != 1:
        raise UsageError("hist supports 1D problems only")
    if cfg.bins < 1:
        raise UsageError("bins must be >= 1")
    h = cfg.h_list[0]
    T = problem.T if cfg.T is None else cfg.T
    n_steps = mc._step_count(T, h)

    states, _ = mc.sample_states(
        problem, cfg.scheme, h, n_steps, cfg.samples, seed=cfg.seed, solver=cfg.solver
    )
    # the reference distribution: Euler-Maruyama at step h^3
    dt_ref = h ** 3
    n_ref = max(1, int(round(T / dt_ref)))
    dt_ref = T / n_ref
    ref, _ = mc.sample_states(problem, "em", dt_ref, n_ref, cfg.samples, seed=cfg.seed + 1)

    v, w = states[:, 0], ref[:, 0]
    lo = min(v.min(), w.min())
    hi = max(v.max(), w.max())
    dens, edges = np.histogram(v, bins=cfg.bins, range=(lo, hi), density=True)
    dens_ref, _ = np.histogram(w, bins=cfg.bins, range=(lo, hi), density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])

    lines = ["bin_center,density,ref_density"]
    for c, a, b in zip(centers, dens, dens_ref):
        lines.append(",".join([_fmt(c), _fmt(a), _fmt(b)]))
    _emit("\n".join(lines) + "\n", cfg.out)

    for label, arr in ((cfg.scheme, v), ("ref", w)):
        m, s = arr.mean(), arr.std()
        zs = (arr - m) / s
        print(f"{label}_skewness = {np.mean(zs ** 3):.4f}")
        print(f"{label}_kurtosis = {np.mean(zs ** 4):.4f}")
    return EXIT_OK


def cmd_moments(cfg: RunConfig) -> int:
    problem = _make_problem(cfg)
    h = cfg.h_list[0]
    moms = mc.one_step_moments(
        problem, cfg.scheme, h=h, samples=cfg.samples, seed=cfg.seed, solver=cfg.solver
    )
    lines = [f"{k} = {moms[k]:.6g}" for k in ("mean", "variance", "skewness", "kurtosis")]
    if problem.trace_bound is not None:
        sb = mc.second_moment_bound(
            problem, cfg.scheme, h=h, samples=cfg.samples, seed=cfg.seed, solver=cfg.solver
        )
        lines.append(f"M2_hat = {sb['M2_hat']:.6g}")
        lines.append(f"M2_bound = {4.0 * sb['bound'] * h:.6g}")
        lines.append(f"M2_holds = {sb['holds']}")
    _emit("\n".join(lines) + "\n", cfg.out)
    return EXIT_OK


def _slope(fn, hs) -> float:
    errs = np.array([fn(h) for h in hs])
    if np.any(errs <= 0.0):
        return float("inf")
    return float(np.polyfit(np.log(hs), np.log(errs), 1)[0])


def cmd_verify(cfg: RunConfig) -> int:
    # w1 override lets tests confirm that a broken weight is caught
    w1 = float(os.environ.get("SDE_VERIFY_W1", mixture.W1))
    rows = []

    def row(name, value, op, threshold):
        ok = value <= threshold if op == "<=" else value >= threshold
        rows.append((name, value, op, threshold, ok))

    for pname, x0 in (("quad1d", 2.0), ("gbm", 5.0)):
        problem = model.builtin_problem(pname)
        res = verify.check_order_conditions(problem, x0, w1=w1)
        row(f"order-conditions-{pname} max_residual", float(res.max()), "<=", 1e-4)

    quad = model.builtin_problem("quad1d")
    res_bad = verify.check_order_conditions(quad, 2.0, w1=0.2)
    row("order-conditions broken-weight detection", float(res_bad.max()), ">=", 1e-2)

    rng = np.random.default_rng(20240817)
    hs = np.array([0.2, 0.1, 0.05, 0.025])
    for d in (1, 2, 3):
        a = rng.standard_normal((d, d))
        lam = a @ a.T + d * np.eye(d)
        x0v = rng.standard_normal(d)
        phi = {}
        for e in np.ndindex(*(7,) * d):
            if sum(e) <= 6:
                phi[tuple(e)] = float(rng.standard_normal())
        row(
            f"beam-sum-lemma d={d} slope",
            _slope(lambda h: verify.beam_sum_residual(lam, x0v, phi, h), hs),
            ">=",
            2.7,
        )

    hs2 = np.array([1 / 8, 1 / 16, 1 / 32, 1 / 64])
    rot = model.builtin_problem("rot2d")
    for kern in ("gm-ode", "gm-var"):
        row(
            f"semigroup quad1d {kern} slope",
            _slope(lambda h: verify.semigroup_residual(quad, [2.0], {(3,): 1.0}, h, kernel=kern), hs2),
            ">=",
            2.7,
        )
        row(
            f"semigroup rot2d {kern} slope",
            _slope(
                lambda h: verify.semigroup_residual(
                    rot, [1.0, 1.0], {(0, 2): 1.0, (3, 0): 0.5}, h, kernel=kern
                ),
                hs2,
            ),
            ">=",
            2.7,
        )
    row(
        "semigroup single-gauss control slope",
        _slope(
            lambda h: verify.semigroup_residual(quad, [2.0], {(3,): 1.0}, h, kernel="single-gauss"),
            hs2,
        ),
        "<=",
        2.3,
    )

    pos = verify.positivity_check(2000, seed=7)
    row("gm-var pre-clip min eigenvalue (rel)", pos["worst_min_eig_rel"], ">=", -1e-10)
    row("gm-var clipped eigenvalues", float(pos["clipped"]), "<=", 0.0)

    width = max(len(r[0]) for r in rows)
    lines = []
    for name, value, op, threshold, ok in rows:
        status = "PASS" if ok else "FAIL"
        lines.append(f"{status} {name:<{width}}  value={value: .6e}  ({op} {threshold:g})")
    _emit("\n".join(lines) + "\n", cfg.out)
    return EXIT_OK if all(r[4] for r in rows) else EXIT_VERIFY


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--problem", help=f"builtin problem name {model.BUILTIN_NAMES}")
    p.add_argument("--scheme", help="transition kernel: em, gm-ode, or gm-var")
    p.add_argument("--solver", help="macro ODE step: rk2 or rk4")
    p.add_argument("--h", help="comma-separated step sizes (floats or fractions like 1/12)")
    p.add_argument("--T", help="time horizon (defaults to the problem's)")
    p.add_argument("--samples", type=int, help="number of trajectories")
    p.add_argument("--slices", type=int, help="error-bar slices (samples must divide evenly)")
    p.add_argument("--seed", type=int, help="master seed for the counter-based streams")
    p.add_argument("--threads", type=int, help="worker processes (default $SDE_THREADS or 1)")
    p.add_argument("--out", help="output path (default stdout)")
    p.add_argument("--config", help="key=value config file (flags take precedence)")
    p.add_argument("--param", action="append", help="problem parameter override k=v (repeatable)")


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="sde",
        description="Gaussian-mixture weak second-order SDE schemes: studies and checks.",
    )
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("converge", help="weak-error convergence study (CSV + order fit)")
    _add_common(p)
    p = sub.add_parser("hist", help="empirical one-time distribution vs fine-step reference")
    _add_common(p)
    p.add_argument("--bins", type=int, help="histogram bin count")
    p = sub.add_parser("moments", help="one-step moment diagnostics")
    _add_common(p)
    p = sub.add_parser("verify", help="numerical verification suite (pass/fail table)")
    _add_common(p)
    return ap


_COMMANDS = {
    "converge": cmd_converge,
    "hist": cmd_hist,
    "moments": cmd_moments,
    "verify": cmd_verify,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = _build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        cfg = _build_config(args)
        return _COMMANDS[args.command](cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        # invalid run setup discovered downstream (divisibility, grids, ...)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
