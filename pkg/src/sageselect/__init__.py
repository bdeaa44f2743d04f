"""Streaming gradient-agreement subset selection.

Build a Frequent Directions sketch of per-example gradients in one pass,
score every example by how well its sketched gradient agrees with the
consensus direction, and keep the top-k (optionally per class).
"""

from .errors import (
    BudgetError,
    ConfigError,
    ConvergenceError,
    DataError,
    FormatError,
    InputShapeError,
    SageError,
    ScaleGuardError,
    StateError,
    StreamError,
)
from .fd_sketch import FrozenSketch, SketchState, sketch_new
from .pipeline import ArraySource, CallableSource, FileSource, RunReport, SageConfig, run_random_baseline, run_sage
from .scoring import ScoreRecord, ScoreTable, SelectionResult

__version__ = "0.1.0"

__all__ = [
    "ArraySource",
    "BudgetError",
    "CallableSource",
    "ConfigError",
    "ConvergenceError",
    "DataError",
    "FileSource",
    "FormatError",
    "FrozenSketch",
    "InputShapeError",
    "RunReport",
    "SageConfig",
    "SageError",
    "ScaleGuardError",
    "ScoreRecord",
    "ScoreTable",
    "SelectionResult",
    "SketchState",
    "StateError",
    "StreamError",
    "run_random_baseline",
    "run_sage",
    "sketch_new",
]
