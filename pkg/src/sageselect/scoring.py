"""Agreement scoring against a sketched consensus direction, and selection.

Every example's gradient is projected through the frozen sketch,
``z = S g``, normalized to ``z_hat`` (or zeroed when it is numerically
nil), and scored by ``alpha = <z_hat, u>`` where ``u`` is the unit mean of
all ``z_hat``. Selection keeps the top-k alphas, globally or per class.
"""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Mapping

import numpy as np

from . import numerics
from .errors import BudgetError, DataError, InputShapeError
from .fd_sketch import FrozenSketch

ZERO_NORM_REL = 1e-12
# Alphas closer than this are ranked as ties (smaller index wins).
TIE_QUANTUM = 1e-12
CONSENSUS_CHUNK = 256
PROJECT_CHUNK = 64


@dataclass(frozen=True)
class ScoreRecord:
    index: int
    label: int | None
    z_norm: float
    alpha: float


@dataclass
class ScoreTable:
    """Column-wise per-example scores; O(N) scalars."""

    index: np.ndarray
    z_norm: np.ndarray
    alpha: np.ndarray
    label: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.index.shape[0])

    def records(self) -> Iterator[ScoreRecord]:
        for pos in range(len(self)):
            label = None if self.label is None else int(self.label[pos])
            yield ScoreRecord(int(self.index[pos]), label, float(self.z_norm[pos]), float(self.alpha[pos]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "label", "z_norm", "alpha"])
            for rec in self.records():
                label = "" if rec.label is None else rec.label
                writer.writerow([rec.index, label, repr(rec.z_norm), repr(rec.alpha)])

    @classmethod
    def from_records(cls, records) -> "ScoreTable":
        records = list(records)
        labels = [r.label for r in records]
        label = None if all(lab is None for lab in labels) else np.array(labels, dtype=np.int64)
        return cls(
            np.array([r.index for r in records], dtype=np.int64),
            np.array([r.z_norm for r in records], dtype=np.float64),
            np.array([r.alpha for r in records], dtype=np.float64),
            label,
        )


@dataclass
class SelectionResult:
    indices: np.ndarray
    budget: int
    per_class_quotas: dict[int, int] | None = None
    degenerate_consensus: bool = False
    truncated: bool = False
    degenerate_classes: tuple[int, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return int(self.indices.shape[0])


def zero_threshold(length: int) -> float:
    return ZERO_NORM_REL * math.sqrt(max(length, 1))


def project(fs: FrozenSketch, g) -> np.ndarray:
    g = numerics.as_vector(g, "gradient")
    if g.shape[0] != fs.dim:
        raise InputShapeError(f"gradient length {g.shape[0]} does not match sketch dimension {fs.dim}")
    return numerics.matvec(fs.matrix, g)


def project_rows(fs: FrozenSketch, rows) -> np.ndarray:
    """Batched :func:`project`; each row's result is independent of batching."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != fs.dim:
        raise InputShapeError(f"gradient batch shape {rows.shape} does not match sketch dimension {fs.dim}")
    out = np.empty((rows.shape[0], fs.rows))
    for start in range(0, rows.shape[0], PROJECT_CHUNK):
        out[start : start + PROJECT_CHUNK] = numerics.batch_matvec(fs.matrix, rows[start : start + PROJECT_CHUNK])
    return out


def normalize_or_zero(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    norm = numerics.vector_norm(z)
    if norm > zero_threshold(z.shape[0]):
        return z / norm
    return np.zeros_like(z)


def normalize_rows(z) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`normalize_or_zero`; also returns the row norms."""
    z = np.asarray(z, dtype=np.float64)
    norms = np.sqrt(np.sum(z * z, axis=1))
    live = norms > zero_threshold(z.shape[1])
    out = np.zeros_like(z)
    out[live] = z[live] / norms[live, None]
    return out, norms


class ConsensusState:
    """Running mean of unit-or-zero projected gradients.

    Rows are summed in fixed chunks of ``CONSENSUS_CHUNK`` consecutive
    examples (chunk boundaries depend only on stream position), and chunk
    sums are combined with Neumaier compensation. The result does not
    depend on how the caller batches its ``add`` calls.
    """

    def __init__(self, dim: int):
        self.dim = int(dim)
        self.count = 0
        self._sum = np.zeros(self.dim)
        self._comp = np.zeros(self.dim)
        self._pending = np.zeros((CONSENSUS_CHUNK, self.dim))
        self._pending_rows = 0
        self.u = np.zeros(self.dim)
        self.mean_norm = 0.0

    def add(self, z_hat) -> None:
        self.add_rows(np.asarray(z_hat, dtype=np.float64)[None, :])

    def add_rows(self, z_hat_rows) -> None:
        rows = np.asarray(z_hat_rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise InputShapeError(f"consensus expects rows of length {self.dim}, got shape {rows.shape}")
        start = 0
        while start < rows.shape[0]:
            take = min(CONSENSUS_CHUNK - self._pending_rows, rows.shape[0] - start)
            self._pending[self._pending_rows : self._pending_rows + take] = rows[start : start + take]
            self._pending_rows += take
            self.count += take
            start += take
            if self._pending_rows == CONSENSUS_CHUNK:
                self._flush()

    def _flush(self) -> None:
        if self._pending_rows == 0:
            return
        part = np.sum(self._pending[: self._pending_rows], axis=0)
        total = self._sum + part
        big = np.abs(self._sum) >= np.abs(part)
        self._comp += np.where(big, (self._sum - total) + part, (part - total) + self._sum)
        self._sum = total
        self._pending_rows = 0

    @property
    def sum_unit(self) -> np.ndarray:
        pending = np.sum(self._pending[: self._pending_rows], axis=0)
        return self._sum + self._comp + pending

    def finalize(self) -> "ConsensusState":
        self._flush()
        if self.count == 0:
            return self
        mean = (self._sum + self._comp) / self.count
        self.mean_norm = numerics.vector_norm(mean)
        self.u = normalize_or_zero(mean)
        return self

    @property
    def degenerate(self) -> bool:
        return not np.any(self.u)


def consensus_accumulate(state: ConsensusState, z_hat) -> ConsensusState:
    state.add(z_hat)
    return state


def agreement(z_hat, u) -> float:
    z_hat = np.asarray(z_hat, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if z_hat.shape != u.shape:
        raise InputShapeError(f"agreement needs equal lengths, got {z_hat.shape} and {u.shape}")
    return float(np.clip(np.sum(z_hat * u), -1.0, 1.0))


def agreement_rows(z_hat_rows, u) -> np.ndarray:
    return np.clip(np.sum(np.asarray(z_hat_rows) * u, axis=1), -1.0, 1.0)


def rank_key(alpha) -> np.ndarray:
    """Alphas snapped to the tie quantum; equal keys are ties."""
    return np.rint(np.asarray(alpha, dtype=np.float64) / TIE_QUANTUM)


def _top_positions(alpha: np.ndarray, k: int) -> list[int]:
    # Bounded heap of size k; heapq.nlargest keeps earlier items first on
    # equal keys, which is the smaller-index tie-break.
    key = rank_key(alpha)
    return heapq.nlargest(k, range(alpha.shape[0]), key=key.__getitem__)


def select_top_k(scores: ScoreTable, k: int, degenerate: bool = False) -> SelectionResult:
    if k < 1:
        raise BudgetError(f"budget k must be >= 1, got {k}")
    n = len(scores)
    truncated = k > n
    picked = _top_positions(scores.alpha, min(k, n))
    indices = np.sort(scores.index[picked]).astype(np.int64)
    return SelectionResult(indices, k, degenerate_consensus=degenerate, truncated=truncated)


def allocate_class_budgets(class_sizes: Mapping[int, int], k: int) -> dict[int, int]:
    """Split ``k`` across classes proportionally to their sizes.

    Ideal shares ``k * n_c / N`` are clamped to ``[lo, n_c]`` (``lo = 1``
    for every nonempty class when ``k`` covers all classes, else 0);
    clamped classes are fixed and the rest re-share the remaining budget
    until nothing moves. Shares are then rounded by largest remainder,
    ties going to the lowest class id. Exact rational arithmetic.
    """
    sizes = {int(c): int(n) for c, n in class_sizes.items()}
    if any(n < 0 for n in sizes.values()):
        raise BudgetError("class sizes must be nonnegative")
    total = sum(sizes.values())
    if k < 0 or k > total:
        raise BudgetError(f"budget {k} exceeds the {total} available examples")
    classes = sorted(c for c, n in sizes.items() if n > 0)
    quotas = {c: 0 for c in sizes}
    if k == 0 or not classes:
        return quotas
    lo = 1 if k >= len(classes) else 0
    fixed: dict[int, int] = {}
    while True:
        free = [c for c in classes if c not in fixed]
        if not free:
            break
        remaining = k - sum(fixed.values())
        weight = sum(sizes[c] for c in free)
        ideal = {c: Fraction(remaining * sizes[c], weight) for c in free}
        over = [c for c in free if ideal[c] > sizes[c]]
        if over:
            fixed.update((c, sizes[c]) for c in over)
            continue
        under = [c for c in free if ideal[c] < lo]
        if under:
            fixed.update((c, lo) for c in under)
            continue
        break
    free = [c for c in classes if c not in fixed]
    alloc = dict(fixed)
    if free:
        remaining = k - sum(fixed.values())
        weight = sum(sizes[c] for c in free)
        ideal = {c: Fraction(remaining * sizes[c], weight) for c in free}
        for c in free:
            alloc[c] = math.floor(ideal[c])
        leftover = remaining - sum(alloc[c] for c in free)
        by_remainder = sorted(free, key=lambda c: (-(ideal[c] - alloc[c]), c))
        for c in by_remainder[:leftover]:
            alloc[c] += 1
    _repair(alloc, sizes, k, lo, classes)
    quotas.update(alloc)
    return quotas


def _repair(alloc, sizes, k, lo, classes):
    # Only reachable when clamping fixed classes in both directions; keeps
    # the sum exact and the bounds intact, deterministically by class id.
    diff = k - sum(alloc.values())
    while diff > 0:
        for c in classes:
            if diff and alloc[c] < sizes[c]:
                alloc[c] += 1
                diff -= 1
    while diff < 0:
        for c in reversed(classes):
            if diff and alloc[c] > lo:
                alloc[c] -= 1
                diff += 1


def select_class_balanced(
    scores: ScoreTable,
    quotas: Mapping[int, int],
    degenerate_classes=(),
) -> SelectionResult:
    """Top-``k_c`` per class by the per-class alphas stored in ``scores``.

    ``scores.alpha`` must already hold ``<z_hat_i, u_c>`` for the class of
    each example. Classes listed in ``degenerate_classes`` have ``u_c = 0``,
    so their quota is filled in index order.
    """
    if scores.label is None:
        raise DataError("class-balanced selection needs labels on every record")
    unknown = set(np.unique(scores.label).tolist()) - set(int(c) for c in quotas)
    if unknown:
        raise DataError(f"records carry labels without a quota: {sorted(unknown)}")
    chosen = []
    for c in sorted(quotas):
        kc = int(quotas[c])
        if kc == 0:
            continue
        members = np.flatnonzero(scores.label == c)
        if kc > members.shape[0]:
            raise BudgetError(f"quota {kc} for class {c} exceeds its {members.shape[0]} members")
        picked = _top_positions(scores.alpha[members], kc)
        chosen.append(scores.index[members[picked]])
    indices = np.sort(np.concatenate(chosen)).astype(np.int64) if chosen else np.zeros(0, dtype=np.int64)
    degenerate_classes = tuple(sorted(int(c) for c in degenerate_classes))
    return SelectionResult(
        indices,
        int(sum(quotas.values())),
        per_class_quotas={int(c): int(q) for c, q in quotas.items()},
        degenerate_consensus=bool(degenerate_classes),
        degenerate_classes=degenerate_classes,
    )
