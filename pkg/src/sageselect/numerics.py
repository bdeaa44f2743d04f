"""Dense linear-algebra kernel for the sketch and scoring paths.

Matrices are plain C-contiguous ``float64`` numpy arrays. The only
non-trivial routine is a cyclic Jacobi eigensolver, used on the small
Gram matrix of a short-wide sketch so that no ``D x D`` object is ever
formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import ConvergenceError, InputShapeError

JACOBI_TOL = 1e-14
JACOBI_MAX_SWEEPS = 64
SYMMETRY_TOL = 1e-9


@dataclass(frozen=True)
class EigDecomposition:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # column j pairs with eigenvalues[j]
    sweeps: int = 0


@dataclass(frozen=True)
class ThinSvd:
    """Thin SVD ``S = U diag(s) Vt`` of a short-wide matrix.

    ``right`` holds the rows of ``Vt``; rows whose singular value falls
    under the rank tolerance are exactly zero.
    """

    singular_values: np.ndarray
    left: np.ndarray
    right: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.left * self.singular_values) @ self.right


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    m = np.ascontiguousarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise InputShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InputShapeError(f"{name} contains non-finite entries")
    return m


def as_vector(values, name: str = "vector") -> np.ndarray:
    v = np.ascontiguousarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise InputShapeError(f"{name} must be 1-D, got shape {v.shape}")
    return v


@numba.njit(cache=True)
def _jacobi_sweeps(a, v, tol, max_sweeps):
    # Cyclic-by-row Jacobi; rotates ``a`` toward diagonal in place and
    # accumulates the rotations into ``v``. Returns (sweeps, off_norm).
    m = a.shape[0]
    norm = 0.0
    for i in range(m):
        for j in range(m):
            norm += a[i, j] * a[i, j]
    norm = np.sqrt(norm)
    off = 0.0
    for sweep in range(max_sweeps + 1):
        off = 0.0
        for i in range(m):
            for j in range(i + 1, m):
                off += 2.0 * a[i, j] * a[i, j]
        off = np.sqrt(off)
        if off <= tol * norm:
            return sweep, off
        if sweep == max_sweeps:
            break
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                for k in range(m):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(m):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(m):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    return -1, off


def sym_eig(a, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS) -> EigDecomposition:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Converges when the off-diagonal Frobenius mass drops to ``tol * ||A||_F``.
    Eigenvalues come back in descending order; equal eigenvalues keep
    their diagonal order.
    """
    a = as_matrix(a, "A")
    m, n = a.shape
    if m != n or m < 1:
        raise InputShapeError(f"sym_eig needs a non-empty square matrix, got {a.shape}")
    scale = np.linalg.norm(a)
    if np.linalg.norm(a - a.T) > SYMMETRY_TOL * scale:
        raise InputShapeError("sym_eig input is not symmetric")
    work = 0.5 * (a + a.T)
    vecs = np.eye(m)
    sweeps, off = _jacobi_sweeps(work, vecs, tol, max_sweeps)
    if sweeps < 0:
        raise ConvergenceError(
            f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal mass {off:.3e})",
            residual=off,
        )
    vals = np.diag(work).copy()
    order = np.argsort(-vals, kind="stable")
    return EigDecomposition(vals[order], np.ascontiguousarray(vecs[:, order]), sweeps)


def gram_rows(s: np.ndarray) -> np.ndarray:
    """``S S^T``, symmetrized."""
    g = s @ s.T
    return 0.5 * (g + g.T)


def default_rank_tol(rows: int) -> float:
    # Squared singular values come out of the Gram accurate to about
    # rows * eps * sigma_max^2, so sigma is resolved only to this ratio.
    return math.sqrt(max(rows, 1) * np.finfo(np.float64).eps)


def thin_svd_short_wide(s, rank_tol: float | None = None) -> ThinSvd:
    """Thin SVD of an ``l x D`` matrix with ``l <= D`` through its ``l x l`` Gram.

    Right singular rows are recovered as ``u_j^T S / sigma_j``. Singular
    values at or below ``rank_tol * sigma_max`` (default: the Gram route's
    resolution, see :func:`default_rank_tol`) are set to zero along with
    their right rows.
    """
    s = as_matrix(s, "S")
    rows, cols = s.shape
    if rows > cols:
        raise InputShapeError(f"thin_svd_short_wide needs rows <= cols, got {s.shape}")
    if rows == 0:
        return ThinSvd(np.zeros(0), np.zeros((0, 0)), np.zeros((0, cols)))
    if rank_tol is None:
        rank_tol = default_rank_tol(rows)
    eig = sym_eig(gram_rows(s))
    sigma = np.sqrt(np.maximum(eig.eigenvalues, 0.0))
    keep = sigma > rank_tol * sigma[0] if sigma[0] > 0.0 else np.zeros(rows, dtype=bool)
    sigma[~keep] = 0.0
    inv = np.zeros(rows)
    inv[keep] = 1.0 / sigma[keep]
    right = (eig.eigenvectors.T * inv[:, None]) @ s
    return ThinSvd(sigma, eig.eigenvectors, right)


def frobenius_norm_sq(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sum(m * m))


def matvec(m, v) -> np.ndarray:
    """``M v`` with a fixed per-row reduction order.

    Each output entry is numpy's pairwise sum over one row, so the result
    for a row never depends on what other rows are being multiplied
    alongside it (see :func:`batch_matvec`).
    """
    m = np.asarray(m, dtype=np.float64)
    v = as_vector(v)
    if m.ndim != 2 or m.shape[1] != v.shape[0]:
        raise InputShapeError(f"matvec shape mismatch: {m.shape} x {v.shape}")
    return np.sum(m * v, axis=1)


def batch_matvec(m, vs) -> np.ndarray:
    """Row ``i`` of the result is bit-identical to ``matvec(m, vs[i])``."""
    m = np.asarray(m, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    if vs.ndim != 2 or m.ndim != 2 or m.shape[1] != vs.shape[1]:
        raise InputShapeError(f"batch_matvec shape mismatch: {m.shape} x {vs.shape}")
    return np.sum(vs[:, None, :] * m[None, :, :], axis=2)


def vector_norm(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    return float(np.sqrt(np.sum(v * v)))
