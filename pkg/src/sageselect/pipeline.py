"""End-to-end selection: sketch pass, scoring sweeps, selection, telemetry.

A run reads its gradient source three times in order: once to build the
sketch, then twice more for scoring (the first accumulates the consensus
direction, the second scores every example against it). Nothing of size
``N x ell`` is kept; only ``N`` scalars per score column.
"""

from __future__ import annotations

import csv
import logging
import math
import statistics
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import data as data_mod
from .errors import ConfigError, InputShapeError, StreamError
from .fd_sketch import FrozenSketch, SketchState
from .scoring import (
    ConsensusState,
    ScoreTable,
    SelectionResult,
    agreement_rows,
    allocate_class_budgets,
    normalize_rows,
    project_rows,
    select_class_balanced,
    select_top_k,
)

log = logging.getLogger(__name__)

METHODS = ("sage", "cb_sage", "random")


@dataclass
class SageConfig:
    ell: int = 16
    budget_fraction: float = 0.1
    class_balanced: bool = False
    seed: int = 0
    batch_size: int = 256

    def __post_init__(self):
        if not 0.0 < self.budget_fraction <= 1.0:
            raise ConfigError(f"budget fraction must lie in (0, 1], got {self.budget_fraction}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    def budget(self, n: int) -> int:
        # Round half up; never empty.
        return max(1, int(math.floor(self.budget_fraction * n + 0.5)))


class GradientSource:
    """Re-iterable stream of gradient rows with a fixed parameter snapshot.

    Subclasses implement ``_blocks``; ``passes`` counts how many times the
    stream has been opened.
    """

    n: int
    dim: int
    labels: np.ndarray | None = None

    def __init__(self):
        self.passes = 0

    def batches(self, batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray | None]]:
        self.passes += 1
        for start in range(0, self.n, batch_size):
            stop = min(start + batch_size, self.n)
            labels = None if self.labels is None else self.labels[start:stop]
            yield self._block(start, stop), labels

    def _block(self, start: int, stop: int) -> np.ndarray:
        raise NotImplementedError


class ArraySource(GradientSource):
    def __init__(self, matrix, labels=None):
        super().__init__()
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise InputShapeError(f"gradient matrix must be 2-D, got shape {self.matrix.shape}")
        self.n, self.dim = self.matrix.shape
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)

    def _block(self, start, stop):
        return self.matrix[start:stop]


class FileSource(GradientSource):
    def __init__(self, path):
        super().__init__()
        self.file = data_mod.GradientFile(path)
        self.n, self.dim = self.file.n, self.file.dim
        self.labels = self.file.labels

    def _block(self, start, stop):
        return self.file.rows(start, stop)


class CallableSource(GradientSource):
    """Rows produced on demand by ``fn(start, stop)``; nothing is materialized."""

    def __init__(self, n: int, dim: int, fn: Callable[[int, int], np.ndarray], labels=None):
        super().__init__()
        self.n, self.dim, self.fn = int(n), int(dim), fn
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)

    def _block(self, start, stop):
        return self.fn(start, stop)


@dataclass
class RunReport:
    selection: SelectionResult
    scores: ScoreTable
    n: int
    budget: int
    score_summary: tuple[float, float, float]
    shrink_count: int
    last_delta: float
    frozen_rows: int
    phase1_ms: float
    phase2_ms: float
    peak_sketch_bytes: int
    degenerate: bool
    method: str = "sage"
    sketch: FrozenSketch | None = None
    consensus: np.ndarray | None = None
    class_consensus: dict[int, np.ndarray] = field(default_factory=dict)

    def summary(self) -> dict:
        sel = self.selection
        return {
            "method": self.method,
            "n": self.n,
            "budget": self.budget,
            "selected": len(sel),
            "truncated": sel.truncated,
            "per_class_quotas": None if sel.per_class_quotas is None else {str(c): q for c, q in sel.per_class_quotas.items()},
            "degenerate": self.degenerate,
            "degenerate_classes": list(sel.degenerate_classes),
            "alpha_min": self.score_summary[0],
            "alpha_max": self.score_summary[1],
            "alpha_mean": self.score_summary[2],
            "shrink_count": self.shrink_count,
            "last_delta": self.last_delta,
            "frozen_rows": self.frozen_rows,
            "phase1_ms": self.phase1_ms,
            "phase2_ms": self.phase2_ms,
            "peak_sketch_bytes": self.peak_sketch_bytes,
        }


def _checked(batches, dim: int, counter: list):
    for rows, labels in batches:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != dim:
            raise InputShapeError(f"source produced a batch of shape {rows.shape}; expected (*, {dim})")
        counter[0] += rows.shape[0]
        yield rows, labels


def build_sketch(source: GradientSource, ell: int, batch_size: int = 256) -> tuple[SketchState, int]:
    state = SketchState(ell, source.dim)
    seen = [0]
    for rows, _ in _checked(source.batches(batch_size), source.dim, seen):
        state.insert_rows(rows)
    return state, seen[0]


@dataclass
class PhaseTwo:
    scores: ScoreTable
    consensus: ConsensusState
    by_class: dict[int, ConsensusState]


def score_stream(source: GradientSource, frozen: FrozenSketch, class_balanced: bool = False, batch_size: int = 256, n: int | None = None) -> PhaseTwo:
    """Score every example against a frozen sketch in two sweeps over ``source``.

    The first sweep folds each unit projected gradient into the consensus
    accumulators (global, and per class when ``class_balanced``); the
    second recomputes projections and scores them. In class-balanced mode
    ``alpha`` holds each example's agreement with its own class centroid.
    """
    width = frozen.rows
    consensus = ConsensusState(width)
    by_class: dict[int, ConsensusState] = {}
    label_parts = []
    seen = [0]
    for rows, labels in _checked(source.batches(batch_size), source.dim, seen):
        z_hat, _ = normalize_rows(project_rows(frozen, rows))
        consensus.add_rows(z_hat)
        if class_balanced:
            if labels is None:
                raise ConfigError("class-balanced selection needs a labelled gradient source")
            labels = np.asarray(labels, dtype=np.int64)
            label_parts.append(labels)
            for c in np.unique(labels):
                by_class.setdefault(int(c), ConsensusState(width)).add_rows(z_hat[labels == c])
    if n is None:
        n = seen[0]
    elif seen[0] != n:
        raise StreamError(f"scoring sweep saw {seen[0]} examples, sketch pass saw {n}")
    consensus.finalize()
    for state_c in by_class.values():
        state_c.finalize()

    alpha = np.empty(n)
    z_norm = np.empty(n)
    label_arr = np.concatenate(label_parts) if label_parts else None
    if label_arr is None and source.labels is not None:
        label_arr = np.asarray(source.labels, dtype=np.int64)
    pos = 0
    seen = [0]
    for rows, _ in _checked(source.batches(batch_size), source.dim, seen):
        if seen[0] > n:
            raise StreamError(f"scoring sweep produced more than {n} examples")
        z_hat, norms = normalize_rows(project_rows(frozen, rows))
        stop = pos + rows.shape[0]
        z_norm[pos:stop] = norms
        if class_balanced:
            block_labels = label_arr[pos:stop]
            for c in np.unique(block_labels):
                mask = block_labels == c
                alpha[pos:stop][mask] = agreement_rows(z_hat[mask], by_class[int(c)].u)
        else:
            alpha[pos:stop] = agreement_rows(z_hat, consensus.u)
        pos = stop
    if seen[0] != n:
        raise StreamError(f"second scoring sweep saw {seen[0]} examples, expected {n}")
    scores = ScoreTable(np.arange(n, dtype=np.int64), z_norm, alpha, label_arr)
    return PhaseTwo(scores, consensus, by_class)


def select(phase: PhaseTwo, k: int, class_balanced: bool) -> SelectionResult:
    scores = phase.scores
    n = len(scores)
    if class_balanced:
        sizes = {c: int(np.sum(scores.label == c)) for c in phase.by_class}
        quotas = allocate_class_budgets(sizes, min(k, n))
        degenerate_classes = [c for c, s in phase.by_class.items() if s.degenerate and quotas[c] > 0]
        selection = select_class_balanced(scores, quotas, degenerate_classes)
        selection.budget = k
        selection.truncated = k > n
    else:
        selection = select_top_k(scores, k, degenerate=phase.consensus.degenerate)
    return selection


def run_sage(source: GradientSource, config: SageConfig) -> RunReport:
    t0 = time.perf_counter()
    state, n = build_sketch(source, config.ell, config.batch_size)
    frozen = state.freeze()
    t1 = time.perf_counter()
    phase = score_stream(source, frozen, config.class_balanced, config.batch_size, n)
    k = config.budget(n)
    selection = select(phase, k, config.class_balanced)
    if selection.degenerate_consensus:
        log.warning("degenerate consensus direction: ranking is meaningless, budget filled by index order")
    t2 = time.perf_counter()
    alpha = phase.scores.alpha
    return RunReport(
        selection=selection,
        scores=phase.scores,
        n=n,
        budget=k,
        score_summary=_alpha_summary(alpha),
        shrink_count=state.shrink_count,
        last_delta=state.last_delta,
        frozen_rows=frozen.rows,
        phase1_ms=1e3 * (t1 - t0),
        phase2_ms=1e3 * (t2 - t1),
        peak_sketch_bytes=state.peak_bytes,
        degenerate=selection.degenerate_consensus,
        sketch=frozen,
        consensus=phase.consensus.u,
        class_consensus={c: st.u for c, st in phase.by_class.items()},
    )


def _alpha_summary(alpha: np.ndarray) -> tuple[float, float, float]:
    if alpha.size == 0:
        return (0.0, 0.0, 0.0)
    return (float(alpha.min()), float(alpha.max()), float(alpha.mean()))


def run_random_baseline(source: GradientSource, config: SageConfig) -> RunReport:
    t0 = time.perf_counter()
    n = source.n
    k = config.budget(n)
    rng = np.random.default_rng(config.seed)
    picked = np.sort(rng.choice(n, size=min(k, n), replace=False)).astype(np.int64)
    selection = SelectionResult(picked, k, truncated=k > n)
    t1 = time.perf_counter()
    empty = np.zeros(n)
    return RunReport(
        selection=selection,
        scores=ScoreTable(np.arange(n, dtype=np.int64), empty, empty.copy(), source.labels),
        n=n,
        budget=k,
        score_summary=(0.0, 0.0, 0.0),
        shrink_count=0,
        last_delta=0.0,
        frozen_rows=0,
        phase1_ms=0.0,
        phase2_ms=1e3 * (t1 - t0),
        peak_sketch_bytes=0,
        degenerate=False,
        method="random",
    )


# -- accuracy-retention experiment -------------------------------------------

EXPERIMENT_FIELDS = ["method", "fraction", "seed", "accuracy", "relative_accuracy", "select_ms", "train_ms", "total_ms"]
SUMMARY_FIELDS = ["method", "fraction", "runs", "mean_accuracy", "std_accuracy", "mean_relative_accuracy", "std_relative_accuracy"]


@dataclass
class ExperimentSettings:
    ell: int = 16
    epochs: int = 20
    lr: float = 0.1
    batch_size: int = 32


def _run_seed(dataset, fractions, methods, seed, settings: ExperimentSettings) -> list[dict]:
    t0 = time.perf_counter()
    grads, labels = data_mod.training_gradients(dataset, seed)
    grad_ms = 1e3 * (time.perf_counter() - t0)
    _, full_acc = data_mod.train_logreg(dataset, None, settings.epochs, settings.lr, seed, settings.batch_size)
    rows = []
    for method in methods:
        for fraction in fractions:
            config = SageConfig(ell=settings.ell, budget_fraction=fraction, class_balanced=method == "cb_sage", seed=seed)
            source = ArraySource(grads, labels)
            t0 = time.perf_counter()
            if method == "random":
                report = run_random_baseline(source, config)
                select_ms = 1e3 * (time.perf_counter() - t0)
            else:
                report = run_sage(source, config)
                select_ms = grad_ms + 1e3 * (time.perf_counter() - t0)
            t1 = time.perf_counter()
            _, acc = data_mod.train_logreg(dataset, report.selection.indices, settings.epochs, settings.lr, seed, settings.batch_size)
            train_ms = 1e3 * (time.perf_counter() - t1)
            rows.append(
                {
                    "method": method,
                    "fraction": fraction,
                    "seed": seed,
                    "accuracy": acc,
                    "relative_accuracy": acc / full_acc if full_acc > 0 else float("nan"),
                    "select_ms": select_ms,
                    "train_ms": train_ms,
                    "total_ms": select_ms + train_ms,
                }
            )
    return rows


def accuracy_retention_experiment(
    dataset: data_mod.BlobDataset,
    fractions,
    methods,
    seeds,
    settings: ExperimentSettings | None = None,
    workers: int = 1,
) -> list[dict]:
    """Select, train and score every (method, fraction, seed) cell.

    Rows come back ordered by seed, then method, then fraction, whatever
    ``workers`` is.
    """
    settings = settings or ExperimentSettings()
    fractions = [float(f) for f in fractions]
    methods = list(methods)
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ConfigError(f"fraction {f} outside (0, 1]")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    if not fractions or not methods:
        return []
    seeds = list(seeds)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda s: _run_seed(dataset, fractions, methods, s, settings), seeds))
    else:
        parts = [_run_seed(dataset, fractions, methods, s, settings) for s in seeds]
    return [row for part in parts for row in part]


def summarize(rows: list[dict]) -> list[dict]:
    cells: dict[tuple, list[dict]] = {}
    for row in rows:
        cells.setdefault((row["method"], row["fraction"]), []).append(row)
    out = []
    for (method, fraction), group in cells.items():
        acc = [r["accuracy"] for r in group]
        rel = [r["relative_accuracy"] for r in group]
        out.append(
            {
                "method": method,
                "fraction": fraction,
                "runs": len(group),
                "mean_accuracy": statistics.fmean(acc),
                "std_accuracy": statistics.stdev(acc) if len(acc) > 1 else 0.0,
                "mean_relative_accuracy": statistics.fmean(rel),
                "std_relative_accuracy": statistics.stdev(rel) if len(rel) > 1 else 0.0,
            }
        )
    return out


def write_rows(path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# -- Phase I benchmark ---------------------------------------------------------

BENCH_FIELDS = ["n", "d", "ell", "phase1_ms", "peak_sketch_bytes", "traced_peak_bytes", "shrink_count"]


def _pool_source(n: int, d: int, seed: int, pool_rows: int = 2048) -> CallableSource:
    # A fixed pool of low-rank-plus-noise rows streamed cyclically, so that
    # producing rows allocates nothing that scales with n.
    pool = data_mod.synth_lowrank(pool_rows, d, min(8, d), 0.1, seed)

    def block(start, stop):
        lo = start % pool_rows
        if lo + (stop - start) <= pool_rows:
            return pool[lo : lo + stop - start]
        return np.take(pool, np.arange(start, stop) % pool_rows, axis=0)

    return CallableSource(n, d, block)


def bench_phase1(n: int, d: int, ell: int, seed: int = 0, trace: bool = True, batch_size: int = 256, repeats: int = 1) -> dict:
    """Time and measure the streaming sketch pass over ``n`` rows.

    ``traced_peak_bytes`` is the tracemalloc peak during the pass (taken
    in a separate traced run so tracing does not distort the timing).
    """
    best = math.inf
    state = None
    for _ in range(repeats):
        source = _pool_source(n, d, seed)
        t0 = time.perf_counter()
        state, _ = build_sketch(source, ell, batch_size)
        best = min(best, 1e3 * (time.perf_counter() - t0))
    traced = -1
    if trace:
        source = _pool_source(n, d, seed)
        tracemalloc.start()
        try:
            tracemalloc.reset_peak()
            base, _ = tracemalloc.get_traced_memory()
            build_sketch(source, ell, batch_size)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        traced = peak - base
    return {
        "n": n,
        "d": d,
        "ell": ell,
        "phase1_ms": best,
        "peak_sketch_bytes": state.peak_bytes,
        "traced_peak_bytes": traced,
        "shrink_count": state.shrink_count,
    }
