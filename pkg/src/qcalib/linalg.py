"""Dense kernels behind calibration: SVD, condition numbers, pseudoinverse, ridge solves.

Everything accumulates in float64 regardless of the caller's storage dtype,
and every routine is a pure function of its inputs, so repeated calls on
identical bytes produce identical bytes.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import NumericalError

# singular values below DEFAULT_RANK_TOLERANCE * sigma_max count as zero
DEFAULT_RANK_TOLERANCE = 1e-6


class SvdResult(NamedTuple):
    """Thin SVD a = u @ diag(s) @ vt with s descending and non-negative."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


def _as_matrix(a, name: str = "a") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {a.shape}")
    if a.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite values")
    return a


def svd(a) -> SvdResult:
    """Thin SVD in float64; raises NumericalError with matrix stats on non-convergence."""
    a = _as_matrix(a)
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"SVD did not converge for shape {a.shape} "
            f"(frobenius_norm={np.linalg.norm(a):.6g}, max_abs={np.abs(a).max():.6g})"
        ) from exc
    return SvdResult(u, s, vt)


def condition_number(a, rank_tolerance: float = DEFAULT_RANK_TOLERANCE) -> float:
    """sigma_max / sigma_min; +inf when the matrix is effectively rank-deficient."""
    a = _as_matrix(a)
    s = svd(a).s
    smax = float(s[0])
    if smax == 0.0:
        raise ValueError("condition number of the zero matrix is undefined")
    smin = float(s[-1])
    if smin < rank_tolerance * smax:
        return float("inf")
    return smax / smin


def pseudoinverse(a, rank_tolerance: float = DEFAULT_RANK_TOLERANCE) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD with a relative singular-value cutoff."""
    a = _as_matrix(a)
    u, s, vt = svd(a)
    cutoff = rank_tolerance * (s[0] if s.size else 0.0)
    inv = np.where(s > cutoff, np.divide(1.0, s, out=np.zeros_like(s), where=s > 0), 0.0)
    return vt.T @ (inv[:, None] * u.T)


def ridge_solve(
    x,
    y,
    lam: float,
    rank_tolerance: float = DEFAULT_RANK_TOLERANCE,
) -> np.ndarray:
    """Minimize ||x @ w.T - y||_F^2 + lam * ||w||_F^2 and return w of shape (p, d).

    Solved through the SVD of x (never forming x.T @ x, which would square the
    condition number).  With lam == 0 this is the minimum-norm pseudoinverse
    solution and requires x to have full effective rank.
    """
    x = _as_matrix(x, "x")
    y = _as_matrix(y, "y")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"x and y row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return ridge_from_svd(svd(x), y, lam, rank_tolerance)


def ridge_from_svd(
    decomp: SvdResult,
    y: np.ndarray,
    lam: float,
    rank_tolerance: float = DEFAULT_RANK_TOLERANCE,
) -> np.ndarray:
    """Ridge solution reusing a precomputed SVD of x; see ridge_solve."""
    u, s, vt = decomp
    smax = float(s[0]) if s.size else 0.0
    if lam == 0.0:
        if smax == 0.0 or float(s[-1]) < rank_tolerance * smax:
            raise NumericalError(
                "x is effectively rank-deficient; lambda=0 would amplify noise "
                "without bound. Use automatic lambda selection (select_lambda) "
                "or pass a positive lambda."
            )
        factors = 1.0 / s
    else:
        factors = s / (s * s + lam)
    wt = vt.T @ (factors[:, None] * (u.T @ np.asarray(y, dtype=np.float64)))
    return wt.T
