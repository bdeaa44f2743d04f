"""Brute-force oracles and bound checkers.

These routines are deliberately naive and dense: they materialize
``G^T G``, every projected gradient, and use LAPACK (``numpy.linalg.eigh``)
rather than the Jacobi solver the sketch relies on, so that a bug in the
streaming path cannot hide in its own reference.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ScaleGuardError
from .fd_sketch import FrozenSketch
from .scoring import ScoreTable, TIE_QUANTUM, ZERO_NORM_REL

MAX_ORACLE_DIM = 512
MAX_ORACLE_ROWS = 5000
PSD_TOL = 1e-8
BOUND_TOL = 1e-8
IDENTITY_RTOL = 1e-10


def _guard(g: np.ndarray, check_rows: bool = True) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise ScaleGuardError(f"oracle expects a 2-D matrix, got shape {g.shape}")
    if g.shape[1] > MAX_ORACLE_DIM:
        raise ScaleGuardError(f"D={g.shape[1]} exceeds the oracle limit {MAX_ORACLE_DIM}")
    if check_rows and g.shape[0] > MAX_ORACLE_ROWS:
        raise ScaleGuardError(f"N={g.shape[0]} exceeds the oracle limit {MAX_ORACLE_ROWS}")
    return g


def exact_gram(g) -> np.ndarray:
    g = _guard(g)
    m = g.T @ g
    return 0.5 * (m + m.T)


def gram_spectrum(g) -> np.ndarray:
    """Eigenvalues of ``G^T G``, descending, clipped at zero."""
    return np.maximum(np.linalg.eigvalsh(exact_gram(g))[::-1], 0.0)


def tail_energy(g, k: int) -> float:
    """``||G - G_k||_F^2``, the energy outside the best rank-k approximation."""
    g = _guard(g)
    if k < 0 or k > min(g.shape):
        raise ValueError(f"k={k} outside [0, {min(g.shape)}]")
    return float(np.sum(gram_spectrum(g)[k:]))


@dataclass
class SandwichReport:
    ell: int
    min_eig_diff: float
    max_eig_diff: float
    energy: float
    bounds: dict[int, float]
    k_max: int
    pass_: bool
    extra_bounds: dict[int, float] = field(default_factory=dict)

    @property
    def tol(self) -> float:
        return PSD_TOL * self.energy

    def rows(self):
        yield ("psd_lower", "", self.min_eig_diff, -self.tol, self.min_eig_diff >= -self.tol)
        for k, b in self.bounds.items():
            yield ("fd_upper", f"k={k}", self.max_eig_diff, b, self.max_eig_diff <= b + BOUND_TOL * self.energy)


def check_psd_sandwich(g, frozen: FrozenSketch, ell: int, k_max: int | None = None) -> SandwichReport:
    """Check ``0 <= G^T G - S^T S <= (2/ell) ||G - G_k||_F^2`` for ``k = 0..k_max``.

    ``k_max`` defaults to ``ceil(ell/2)``. Bounds for larger ``k`` (up to
    ``ell``) land in ``extra_bounds`` and are reported, never asserted.
    """
    g = _guard(g)
    s = np.asarray(frozen.matrix, dtype=np.float64)
    diff = exact_gram(g) - s.T @ s
    eig = np.linalg.eigvalsh(0.5 * (diff + diff.T))
    spectrum = gram_spectrum(g)
    energy = float(np.sum(g * g))
    if k_max is None:
        k_max = math.ceil(ell / 2)
    k_max = min(k_max, min(g.shape))
    tails = np.concatenate([np.cumsum(spectrum[::-1])[::-1], [0.0]])
    bounds = {k: 2.0 / ell * float(tails[k]) for k in range(k_max + 1)}
    extra = {k: 2.0 / ell * float(tails[k]) for k in range(k_max + 1, min(ell, min(g.shape)) + 1)}
    lo, hi = float(eig[0]), float(eig[-1])
    ok = lo >= -PSD_TOL * energy and all(hi <= b + BOUND_TOL * energy for b in bounds.values())
    return SandwichReport(ell, lo, hi, energy, bounds, k_max, ok, extra)


@dataclass
class NaiveScores:
    scores: ScoreTable
    z: np.ndarray
    z_hat: np.ndarray
    u: np.ndarray
    class_u: dict[int, np.ndarray]
    class_alpha: np.ndarray | None

    @property
    def degenerate(self) -> bool:
        return not np.any(self.u)


def _unit_or_zero(v):
    n = np.linalg.norm(v)
    return v / n if n > ZERO_NORM_REL * math.sqrt(v.shape[0]) else np.zeros_like(v)


def naive_scores(g, frozen: FrozenSketch, labels=None) -> NaiveScores:
    """Dense reference for scoring: all ``z_i``, ``z_hat_i``, ``u`` (and ``u_c``)."""
    g = _guard(g)
    s = np.asarray(frozen.matrix, dtype=np.float64)
    z = g @ s.T
    z_hat = np.array([_unit_or_zero(row) for row in z]).reshape(z.shape)
    u = _unit_or_zero(z_hat.mean(axis=0)) if z.shape[0] else np.zeros(s.shape[0])
    alpha = np.clip(z_hat @ u, -1.0, 1.0)
    norms = np.linalg.norm(z, axis=1)
    class_u: dict[int, np.ndarray] = {}
    class_alpha = None
    label_arr = None
    if labels is not None:
        label_arr = np.asarray(labels, dtype=np.int64)
        class_alpha = np.zeros(z.shape[0])
        for c in np.unique(label_arr):
            members = label_arr == c
            class_u[int(c)] = _unit_or_zero(z_hat[members].mean(axis=0))
            class_alpha[members] = np.clip(z_hat[members] @ class_u[int(c)], -1.0, 1.0)
    table = ScoreTable(np.arange(z.shape[0], dtype=np.int64), norms, alpha, label_arr)
    return NaiveScores(table, z, z_hat, u, class_u, class_alpha)


def naive_top_k(alpha, k: int) -> np.ndarray:
    """Full-sort selection: descending alpha (snapped to the tie quantum), then index."""
    alpha = np.asarray(alpha, dtype=np.float64)
    key = np.rint(alpha / TIE_QUANTUM)
    order = np.lexsort((np.arange(alpha.shape[0]), -key))
    return np.sort(order[: min(k, alpha.shape[0])])


@dataclass
class LemmaCheck:
    xi: float
    lhs: float
    rhs: float
    identity_error: float
    applicable: bool
    pass_: bool
    name: str = "lemma1"

    def rows(self):
        yield (self.name, f"xi={self.xi!r}", self.lhs, self.rhs, self.pass_)
        if self.name == "lemma1":
            yield ("lemma1_identity", "", self.identity_error, IDENTITY_RTOL, self.identity_error <= IDENTITY_RTOL)


def check_lemma1(scores: ScoreTable, selected, z=None, u=None) -> LemmaCheck:
    """Energy along the consensus over ``T``: ``sum (|z| alpha)^2 >= xi^2 sum |z|^2``.

    When the raw projections ``z`` and ``u`` are given, also checks the
    identity ``<z_i, u> = |z_i| alpha_i`` (relative error, normalized by
    ``|z_i|``).
    """
    selected = np.asarray(selected, dtype=np.int64)
    alpha = scores.alpha[selected]
    zn = scores.z_norm[selected]
    if selected.size == 0 or np.any(alpha <= 0.0):
        return LemmaCheck(float("nan"), float("nan"), float("nan"), 0.0, False, True)
    xi = float(alpha.min())
    lhs = float(np.sum((zn * alpha) ** 2))
    rhs = xi**2 * float(np.sum(zn**2))
    identity_error = 0.0
    if z is not None and u is not None:
        zs = np.asarray(z)[selected]
        direct = zs @ np.asarray(u)
        scale = np.maximum(zn, np.finfo(float).tiny)
        identity_error = float(np.max(np.abs(direct - zn * alpha) / scale))
    ok = lhs >= rhs * (1.0 - IDENTITY_RTOL) and identity_error <= IDENTITY_RTOL
    return LemmaCheck(xi, lhs, rhs, identity_error, True, ok)


def check_corollary(scores: ScoreTable, selected, z, u=None) -> LemmaCheck:
    """Mean alignment: ``|(1/k) sum_T z_i| >= xi (1/k) sum_T |z_i|`` with slack 1e-10."""
    selected = np.asarray(selected, dtype=np.int64)
    alpha = scores.alpha[selected]
    if selected.size == 0 or np.any(alpha <= 0.0):
        return LemmaCheck(float("nan"), float("nan"), float("nan"), 0.0, False, True, "corollary")
    xi = float(alpha.min())
    zs = np.asarray(z)[selected]
    k = selected.size
    lhs = float(np.linalg.norm(zs.sum(axis=0) / k))
    rhs = xi * float(np.linalg.norm(zs, axis=1).sum() / k)
    return LemmaCheck(xi, lhs, rhs, 0.0, True, lhs >= rhs - 1e-10, "corollary")


def write_verdicts(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["check", "param", "value", "bound", "pass"])
        for check, param, value, bound, ok in rows:
            writer.writerow([check, param, repr(float(value)), repr(float(bound)), "true" if ok else "false"])


# -- randomized sandwich suite ---------------------------------------------------

SUITE_ELLS = (4, 8, 16, 32)


@dataclass(frozen=True)
class SuiteCase:
    seed: int
    n: int
    d: int
    ell: int
    kind: str  # "lowrank" or "gaussian"

    def matrix(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 7])
        if self.kind == "gaussian":
            return rng.standard_normal((self.n, self.d))
        rank = int(rng.integers(1, min(self.d, 12) + 1))
        noise = float(rng.choice([0.0, 0.01, 0.1, 0.5]))
        a = rng.standard_normal((self.n, rank)) * np.geomspace(10.0, 1.0, rank)
        return a @ rng.standard_normal((rank, self.d)) + noise * rng.standard_normal((self.n, self.d))


def suite_cases(count: int = 100, seed: int = 0, d: int | None = None) -> list[SuiteCase]:
    """Seeded stream shapes: N in [100, 5000], D in [16, 128], ell <= D."""
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(count):
        dim = int(rng.integers(16, 129)) if d is None else int(d)
        ell = int(rng.choice([e for e in SUITE_ELLS if e <= dim] or [min(SUITE_ELLS)]))
        n = int(rng.integers(100, 5001))
        kind = "lowrank" if i % 2 == 0 else "gaussian"
        cases.append(SuiteCase(int(rng.integers(2**31)), n, dim, ell, kind))
    return cases
