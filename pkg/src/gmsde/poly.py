"""Sparse multivariate polynomials as {exponent tuple: coefficient} dicts.

Just enough symbolic machinery for the verification module: evaluation,
differentiation, products, the SDE generator applied to a polynomial with
polynomial coefficients, and exact Gaussian expectations via the Wick
pairing recursion.
"""

from __future__ import annotations

from math import comb
from typing import Dict, Sequence, Tuple

import numpy as np

Poly = Dict[Tuple[int, ...], float]

__all__ = [
    "Poly",
    "monomial",
    "p_add",
    "p_scale",
    "p_mul",
    "p_diff",
    "p_directional",
    "p_eval",
    "p_degree",
    "generator_apply",
    "gauss_expect",
]


def monomial(exps: Sequence[int], coeff: float = 1.0) -> Poly:
    return {tuple(int(e) for e in exps): float(coeff)}


def p_add(*polys: Poly) -> Poly:
    out: Poly = {}
    for p in polys:
        for e, c in p.items():
            out[e] = out.get(e, 0.0) + c
    return {e: c for e, c in out.items() if c != 0.0}


def p_scale(p: Poly, a: float) -> Poly:
    return {e: a * c for e, c in p.items()} if a != 0.0 else {}


def p_mul(a: Poly, b: Poly) -> Poly:
    out: Poly = {}
    for ea, ca in a.items():
        for eb, cb in b.items():
            e = tuple(i + j for i, j in zip(ea, eb))
            out[e] = out.get(e, 0.0) + ca * cb
    return {e: c for e, c in out.items() if c != 0.0}


def p_diff(p: Poly, i: int) -> Poly:
    out: Poly = {}
    for e, c in p.items():
        if e[i] > 0:
            e2 = e[:i] + (e[i] - 1,) + e[i + 1 :]
            out[e2] = out.get(e2, 0.0) + c * e[i]
    return out


def p_directional(p: Poly, v: np.ndarray) -> Poly:
    """v . grad p, with v a constant vector."""
    return p_add(*(p_scale(p_diff(p, i), float(v[i])) for i in range(len(v))))


def p_eval(p: Poly, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    total = 0.0
    for e, c in p.items():
        total += c * float(np.prod(x ** np.array(e)))
    return total


def p_degree(p: Poly) -> int:
    return max((sum(e) for e in p), default=0)


def generator_apply(b_polys: Sequence[Poly], lam_polys: Sequence[Sequence[Poly]], p: Poly) -> Poly:
    """L p = sum_i b_i d_i p + 1/2 sum_ij Lambda_ij d_ij p, all polynomial."""
    d = len(b_polys)
    terms = []
    for i in range(d):
        terms.append(p_mul(b_polys[i], p_diff(p, i)))
    for i in range(d):
        for j in range(d):
            terms.append(p_scale(p_mul(lam_polys[i][j], p_diff(p_diff(p, i), j)), 0.5))
    return p_add(*terms)


def _central_moment(beta: Tuple[int, ...], cov: np.ndarray, memo: dict) -> float:
    total = sum(beta)
    if total == 0:
        return 1.0
    if total % 2 == 1:
        return 0.0
    if beta in memo:
        return memo[beta]
    i = next(k for k, b in enumerate(beta) if b > 0)
    rest = beta[:i] + (beta[i] - 1,) + beta[i + 1 :]
    acc = 0.0
    for j, bj in enumerate(rest):
        if bj > 0:
            nxt = rest[:j] + (rest[j] - 1,) + rest[j + 1 :]
            acc += bj * cov[i, j] * _central_moment(nxt, cov, memo)
    memo[beta] = acc
    return acc


def gauss_expect(p: Poly, mean: np.ndarray, cov: np.ndarray) -> float:
    """E p(Y) for Y ~ N(mean, cov), exact (Wick pairing recursion)."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    memo: dict = {}
    total = 0.0
    for alpha, c in p.items():
        # binomial shift: E prod (m_i + y_i)^a_i
        betas = [()]
        coefs = [1.0]
        for i, a in enumerate(alpha):
            new_betas, new_coefs = [], []
            for b, w in zip(betas, coefs):
                for k in range(a + 1):
                    new_betas.append(b + (k,))
                    new_coefs.append(w * comb(a, k) * mean[i] ** (a - k))
            betas, coefs = new_betas, new_coefs
        for b, w in zip(betas, coefs):
            if w != 0.0:
                total += c * w * _central_moment(b, cov, memo)
    return total
