"""Small dense symmetric eigen-kernels: Jacobi decomposition, PSD
projection, and square-root factors.

Sized for the matrices this library actually meets (d <= 6 in the builtin
problems, d <= 64 supported).  Cyclic Jacobi keeps the decomposition
deterministic and dependency-free; ordering and signs are normalized so
downstream sampling is reproducible run to run.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

__all__ = ["SymEig", "sym_eig", "psd_clip", "sqrt_factor"]

_MAX_SWEEPS = 100
_OFF_TOL = 1e-14


@dataclass(frozen=True)
class SymEig:
    """Eigenvalues (descending) and orthonormal eigenvectors (columns)."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _check_square_symmetric(a: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{what} must be a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite entries")
    # tolerate roundoff-level asymmetry, then work on the symmetric part
    return 0.5 * (a + a.T)


def _normalize(w: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-w, kind="stable")
    w = w[order]
    v = v[:, order]
    # sign convention: largest-magnitude entry of each column nonnegative
    piv = np.argmax(np.abs(v), axis=0)
    signs = np.where(v[piv, np.arange(v.shape[1])] < 0.0, -1.0, 1.0)
    return w, v * signs


def sym_eig(a: np.ndarray, warm_start: Optional[np.ndarray] = None) -> SymEig:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    ``warm_start`` may supply an orthogonal matrix (e.g. the previous
    step's eigenvectors) used to pre-rotate the matrix; the result is
    unchanged up to roundoff but convergence is faster when the hint is
    close.
    """
    a = _check_square_symmetric(a, "matrix")
    d = a.shape[0]
    if d == 1:
        return SymEig(a[0].copy(), np.ones((1, 1)))

    if warm_start is not None:
        q0 = np.asarray(warm_start, dtype=float)
        if q0.shape != (d, d):
            raise ValueError("warm_start must match the matrix shape")
        a = q0.T @ a @ q0
        a = 0.5 * (a + a.T)
        v = q0.copy()
    else:
        v = np.eye(d)

    norm = np.linalg.norm(a)
    if norm == 0.0:
        return SymEig(np.zeros(d), np.eye(d))
    tol = _OFF_TOL * norm

    for _ in range(_MAX_SWEEPS):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2) * 2.0)
        if off <= tol:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if abs(apq) <= tol / (d * d):
                    continue
                theta = 0.5 * (a[q, q] - a[p, p]) / apq
                t = np.sign(theta) / (abs(theta) + np.hypot(1.0, theta))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.hypot(1.0, t)
                s = t * c
                rot = np.array([[c, s], [-s, c]])
                idx = [p, q]
                a[idx, :] = rot.T @ a[idx, :]
                a[:, idx] = a[:, idx] @ rot
                v[:, idx] = v[:, idx] @ rot

    w = np.diag(a).copy()
    w, v = _normalize(w, v)
    return SymEig(w, v)


def psd_clip(s: np.ndarray) -> Tuple[np.ndarray, int]:
    """Project a symmetric matrix onto the PSD cone by zeroing negative
    eigenvalues.  Returns the projection and the count of eigenvalues
    strictly below the zero band.

    Eigenvalues within ``1e-12 * ||s||`` of zero are snapped to zero
    without counting, so a numerically PSD input reports zero clips.
    """
    s = _check_square_symmetric(s, "matrix")
    eig = sym_eig(s)
    w = eig.eigenvalues
    zero_band = 1e-12 * max(1e-300, float(np.max(np.abs(w), initial=0.0)))
    clipped_count = int(np.sum(w < -zero_band))
    w_plus = np.where(np.abs(w) <= zero_band, 0.0, np.maximum(w, 0.0))
    out = (eig.eigenvectors * w_plus) @ eig.eigenvectors.T
    return 0.5 * (out + out.T), clipped_count


def sqrt_factor(s: np.ndarray) -> np.ndarray:
    """A factor R with R R^T = s for PSD s, via the eigendecomposition.

    Residual negative eigenvalues from roundoff are treated as zero.
    """
    s = _check_square_symmetric(s, "matrix")
    eig = sym_eig(s)
    w = np.maximum(eig.eigenvalues, 0.0)
    return eig.eigenvectors * np.sqrt(w)
