"""Dense double-precision helpers and a cyclic Jacobi symmetric eigensolver.

Matrices are plain ``numpy.ndarray`` values of dtype float64. Embedding
batches are ``(n, d)`` arrays with one row per sample.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import BatchTooSmall, ConvergenceError, NonFinite, NonSymmetric, ShapeMismatch

MAX_EIG_DIM = 512
OFFDIAG_TOL = 1e-12
MAX_SWEEPS = 100


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array (copied only if needed)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFinite(f"{name} contains NaN or Inf")
    return m


def as_batch(z, name: str = "batch", min_rows: int = 2) -> np.ndarray:
    m = as_matrix(z, name)
    if m.shape[0] < min_rows:
        raise BatchTooSmall(f"{name} needs at least {min_rows} rows, got {m.shape[0]}")
    return m


@dataclass(frozen=True)
class EigenDecomposition:
    """Columns of ``basis`` are orthonormal eigenvectors; ``eigenvalues`` descend."""

    basis: np.ndarray
    eigenvalues: np.ndarray
    sweeps: int = 0

    def reconstruct(self) -> np.ndarray:
        return (self.basis * self.eigenvalues) @ self.basis.T


@lru_cache(maxsize=64)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Disjoint (p, q) pairings covering every index pair once per sweep."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1], *players[1:-1]]
    return tuple(rounds)


def _offdiag_norm(a: np.ndarray) -> float:
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return float(np.linalg.norm(off))


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[idx, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


def symmetric_eigendecompose(a, tol: float = 1e-10) -> EigenDecomposition:
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, grouped into rounds of
    disjoint pairs (round-robin ordering) so a whole round is applied with
    vectorized column/row updates. Iteration stops once the off-diagonal
    Frobenius norm drops below ``1e-12 * ||A||_F``.

    Eigenvalues are returned in descending order and every eigenvector is
    signed so that its largest-magnitude component is positive.
    """
    a = as_matrix(a, "a")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeMismatch(f"matrix must be square, got {a.shape}")
    if n > MAX_EIG_DIM:
        raise ShapeMismatch(f"dimension {n} exceeds {MAX_EIG_DIM}")
    scale = max(1.0, float(np.max(np.abs(a)))) if n else 1.0
    asym = float(np.max(np.abs(a - a.T))) if n else 0.0
    if asym > tol * scale:
        raise NonSymmetric(f"max |A - A^T| = {asym:.3e} exceeds tolerance")

    work = 0.5 * (a + a.T)
    basis = np.eye(n)
    total = float(np.linalg.norm(work))
    sweeps = 0
    if n > 1 and total > 0.0:
        threshold = OFFDIAG_TOL * total
        rounds = _round_robin(n)
        while _offdiag_norm(work) > threshold:
            if sweeps >= MAX_SWEEPS:
                raise ConvergenceError(f"Jacobi did not converge in {MAX_SWEEPS} sweeps")
            for p, q in rounds:
                apq = work[p, q]
                app, aqq = work[p, p], work[q, q]
                # entries below the diagonal's rounding level are dropped, not rotated
                tiny = 100.0 * np.abs(apq)
                active = ~((np.abs(app) + tiny == np.abs(app)) & (np.abs(aqq) + tiny == np.abs(aqq)))
                if not np.any(active):
                    work[p, q] = 0.0
                    work[q, p] = 0.0
                    continue
                safe = np.where(active, apq, 1.0)
                tau = (aqq - app) / (2.0 * safe)
                t = np.where(tau >= 0.0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c

                cols_p, cols_q = work[:, p].copy(), work[:, q].copy()
                work[:, p] = c * cols_p - s * cols_q
                work[:, q] = s * cols_p + c * cols_q
                rows_p, rows_q = work[p, :].copy(), work[q, :].copy()
                work[p, :] = c[:, None] * rows_p - s[:, None] * rows_q
                work[q, :] = s[:, None] * rows_p + c[:, None] * rows_q
                work[p, q] = 0.0
                work[q, p] = 0.0

                vp, vq = basis[:, p].copy(), basis[:, q].copy()
                basis[:, p] = c * vp - s * vq
                basis[:, q] = s * vp + c * vq
            sweeps += 1

    eigenvalues = np.diag(work).copy()
    order = np.argsort(-eigenvalues, kind="stable")
    return EigenDecomposition(
        basis=_fix_signs(basis[:, order]),
        eigenvalues=eigenvalues[order],
        sweeps=sweeps,
    )


def batch_covariance(z) -> np.ndarray:
    """Unbiased covariance ``(1/(n-1)) * sum_i (z_i - mean)(z_i - mean)^T``."""
    z = as_batch(z, "z")
    centered = z - z.mean(axis=0)
    cov = centered.T @ centered / (z.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    # diagonal taken from the same reduction batch_variance uses, so the two agree bitwise
    np.fill_diagonal(cov, _variance_of_centered(centered))
    return cov


def batch_variance(z) -> np.ndarray:
    """Per-dimension unbiased variance; equals ``diag(batch_covariance(z))``."""
    z = as_batch(z, "z")
    return _variance_of_centered(z - z.mean(axis=0))


def _variance_of_centered(centered: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->j", centered, centered) / (centered.shape[0] - 1)


def spectral_effective_rank(singular_values: np.ndarray, rel_cutoff: float = 1e-12) -> float:
    """``exp`` of the Shannon entropy of the normalized singular values."""
    s = np.asarray(singular_values, dtype=np.float64)
    top = float(np.max(s)) if s.size else 0.0
    if top <= 0.0:
        return 1.0
    s = s[s > rel_cutoff * top]
    p = s / s.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


def effective_rank(z) -> float:
    """Effective rank of the centered batch, clamped to ``[1, min(n-1, d)]``."""
    z = as_batch(z, "z")
    centered = z - z.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    upper = float(min(z.shape[0] - 1, z.shape[1]))
    return min(max(spectral_effective_rank(sv), 1.0), upper)
