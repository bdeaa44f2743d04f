"""Streaming Frequent Directions sketch over gradient rows.

The sketch keeps a ``2*ell x dim`` buffer. Rows are written into free
(zero) slots; when the buffer fills it is shrunk: thin SVD, subtract
``delta = sigma_{ell+1}^2`` from every squared singular value, and keep
the at most ``ell`` surviving directions. With this pivot,

    0 <= G^T G - S^T S <= (2/ell) ||G - G_k||_F^2 I   for k <= ceil(ell/2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import ConfigError, DataError, InputShapeError, StateError


@dataclass(frozen=True)
class FrozenSketch:
    matrix: np.ndarray
    source_count: int

    def __post_init__(self):
        self.matrix.setflags(write=False)

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


class SketchState:
    """Mutable FD sketch. Drive it from one thread; freeze when done.

    Besides the sketch itself the state tracks ``peak_bytes``: the largest
    amount of float storage owned by the sketch path at any moment
    (buffer plus shrink workspace). It depends on ``ell`` and ``dim`` only.
    """

    def __init__(self, ell: int, dim: int):
        if ell < 2:
            raise ConfigError(f"sketch size ell must be >= 2, got {ell}")
        if dim < 1:
            raise ConfigError(f"dimension must be >= 1, got {dim}")
        if ell > dim:
            raise ConfigError(f"sketch size ell={ell} exceeds dimension {dim}")
        self.ell = int(ell)
        self.dim = int(dim)
        self.buffer = np.zeros((2 * self.ell, self.dim))
        self.occupied = 0
        self.inserted_total = 0
        self.shrink_count = 0
        self.last_delta = 0.0
        self.frozen = False
        self.peak_bytes = self.buffer.nbytes

    def insert(self, g) -> None:
        self._check_live()
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (self.dim,):
            raise InputShapeError(f"gradient has shape {g.shape}, sketch expects ({self.dim},)")
        bad = np.flatnonzero(~np.isfinite(g))
        if bad.size:
            raise DataError(f"non-finite gradient entry at index {int(bad[0])}")
        self.buffer[self.occupied] = g
        self.occupied += 1
        self.inserted_total += 1
        if self.occupied == 2 * self.ell:
            self.shrink()

    def insert_rows(self, rows) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise InputShapeError(f"batch has shape {rows.shape}, sketch expects (*, {self.dim})")
        self._check_live()
        bad = np.argwhere(~np.isfinite(rows))
        if bad.size:
            raise DataError(f"non-finite gradient entry at row {int(bad[0, 0])}, index {int(bad[0, 1])}")
        # Same effect as inserting row by row: fill free slots, shrink when full.
        start = 0
        while start < rows.shape[0]:
            take = min(2 * self.ell - self.occupied, rows.shape[0] - start)
            self.buffer[self.occupied : self.occupied + take] = rows[start : start + take]
            self.occupied += take
            self.inserted_total += take
            start += take
            if self.occupied == 2 * self.ell:
                self.shrink()

    def shrink(self) -> None:
        self._check_live()
        live = self.buffer[: self.occupied]
        if live.shape[0] <= self.dim:
            svd = numerics.thin_svd_short_wide(live)
            right = svd.right
        else:
            # ell <= dim < 2*ell: decompose the transpose; its left vectors
            # are this buffer's right singular vectors.
            svd = numerics.thin_svd_short_wide(live.T)
            right = svd.left.T
        sq = svd.singular_values**2
        delta = float(sq[self.ell]) if sq.shape[0] > self.ell else 0.0
        keep = min(self.ell, sq.shape[0])
        shrunk_sq = np.maximum(sq[:keep] - delta, 0.0)
        survivors = int(np.count_nonzero(shrunk_sq > 0.0))
        new_rows = np.sqrt(shrunk_sq[:survivors])[:, None] * right[:survivors]
        # Gram + eigenvectors (m x m each) + right factor (m x dim) + new rows.
        m = min(live.shape)
        workspace = 8 * (2 * m * m + m * max(live.shape) + survivors * self.dim)
        self.peak_bytes = max(self.peak_bytes, self.buffer.nbytes + workspace)
        self.buffer[:] = 0.0
        self.buffer[:survivors] = new_rows
        self.occupied = survivors
        self.shrink_count += 1
        self.last_delta = delta

    def gram(self) -> np.ndarray:
        """``S^T S`` of the current sketch (``dim x dim``; testing aid)."""
        live = self.buffer[: self.occupied]
        return live.T @ live

    def freeze(self) -> FrozenSketch:
        """Copy out the nonzero rows and retire this state."""
        self._check_live()
        if self.inserted_total == 0:
            raise StateError("cannot freeze an empty sketch")
        live = self.buffer[: self.occupied]
        nonzero = np.any(live != 0.0, axis=1)
        matrix = np.ascontiguousarray(live[nonzero])
        self.frozen = True
        return FrozenSketch(matrix, self.inserted_total)

    def _check_live(self):
        if self.frozen:
            raise StateError("sketch has been frozen and can no longer be modified")


def sketch_new(ell: int, dim: int) -> SketchState:
    return SketchState(ell, dim)


def sketch_matrix(rows, ell: int) -> FrozenSketch:
    """Sketch a whole in-memory matrix in row order."""
    rows = np.asarray(rows, dtype=np.float64)
    state = SketchState(ell, rows.shape[1])
    state.insert_rows(rows)
    return state.freeze()
