"""Gradient sources and the small-scale experiment substrate.

Binary gradient files (``.sagegrdm``), all little-endian::

    offset  size  field
    0       8     magic  b"SAGEGRDM"
    8       4     version (u32, currently 1)
    12      8     n (u64)
    20      8     d (u64)
    28      1     dtype code (0 = float32, 1 = float64)
    29      1     flags (bit 0: labels present, bit 1: file holds a sketch)
    30      4*n   labels (u32), only when flagged
    ...     n*d   values, row-major

Also here: seeded synthetic generators, a Gaussian-blob classification
dataset, and multinomial logistic regression with exact per-example
gradients.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BudgetError, ConfigError, DataError, FormatError

MAGIC = b"SAGEGRDM"
VERSION = 1
HEADER = struct.Struct("<8sIQQBB")
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
FLAG_LABELS = 1
FLAG_SKETCH = 2


@dataclass(frozen=True)
class GradientHeader:
    n: int
    d: int
    dtype_code: int
    has_labels: bool
    is_sketch: bool

    @property
    def dtype(self) -> np.dtype:
        return DTYPES[self.dtype_code]

    @property
    def labels_offset(self) -> int:
        return HEADER.size

    @property
    def values_offset(self) -> int:
        return HEADER.size + (4 * self.n if self.has_labels else 0)

    @property
    def file_size(self) -> int:
        return self.values_offset + self.n * self.d * self.dtype.itemsize


def write_gradients(path, matrix, labels=None, dtype="float64", sketch: bool = False) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise DataError(f"gradient matrix must be 2-D, got shape {matrix.shape}")
    bad_rows = np.flatnonzero(~np.all(np.isfinite(matrix), axis=1))
    if bad_rows.size:
        raise DataError(f"non-finite gradient values in row {int(bad_rows[0])}")
    code = {"float32": 0, "float64": 1}.get(str(np.dtype(dtype)))
    if code is None:
        raise ConfigError(f"unsupported dtype {dtype!r}; use float32 or float64")
    n, d = matrix.shape
    flags = (FLAG_LABELS if labels is not None else 0) | (FLAG_SKETCH if sketch else 0)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n, d, code, flags))
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape != (n,):
                raise DataError(f"expected {n} labels, got shape {labels.shape}")
            if np.any(labels < 0):
                raise DataError("labels must be nonnegative")
            fh.write(labels.astype("<u4").tobytes())
        fh.write(matrix.astype(DTYPES[code]).tobytes())


def read_header(path) -> GradientHeader:
    size = Path(path).stat().st_size
    with open(path, "rb") as fh:
        raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise FormatError("truncated header", offset=len(raw))
    magic, version, n, d, code, flags = HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=8)
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset=28)
    if flags & ~(FLAG_LABELS | FLAG_SKETCH):
        raise FormatError(f"unknown flag bits {flags:#x}", offset=29)
    header = GradientHeader(n, d, code, bool(flags & FLAG_LABELS), bool(flags & FLAG_SKETCH))
    if size != header.file_size:
        raise FormatError(f"file is {size} bytes, header declares {header.file_size}", offset=min(size, header.file_size))
    return header


class GradientFile:
    """Read-only view of a gradient file; rows are served from a memory map."""

    def __init__(self, path):
        self.path = Path(path)
        self.header = read_header(self.path)
        h = self.header
        self._values = np.memmap(self.path, dtype=h.dtype, mode="r", offset=h.values_offset, shape=(h.n, h.d)) if h.n * h.d else np.zeros((h.n, h.d), dtype=h.dtype)
        self.labels = None
        if h.has_labels:
            self.labels = np.fromfile(self.path, dtype="<u4", count=h.n, offset=h.labels_offset).astype(np.int64)

    @property
    def n(self) -> int:
        return self.header.n

    @property
    def dim(self) -> int:
        return self.header.d

    def rows(self, start: int, stop: int) -> np.ndarray:
        block = np.array(self._values[start:stop], dtype=np.float64)
        bad = np.flatnonzero(~np.all(np.isfinite(block), axis=1))
        if bad.size:
            raise DataError(f"non-finite gradient values in row {start + int(bad[0])}")
        return block


def read_gradients(path) -> tuple[np.ndarray, np.ndarray | None]:
    gf = GradientFile(path)
    return gf.rows(0, gf.n), gf.labels


def synth_lowrank(n: int, d: int, rank: int, noise_sigma: float, seed: int) -> np.ndarray:
    """``A B + noise`` with standard normal factors; a pure function of ``seed``."""
    if rank < 0 or rank > min(n, d):
        raise ConfigError(f"rank {rank} must lie in [0, min(n, d)] = [0, {min(n, d)}]")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, rank))
    b = rng.standard_normal((rank, d))
    g = a @ b
    if noise_sigma:
        g = g + noise_sigma * rng.standard_normal((n, d))
    return g


@dataclass(frozen=True)
class BlobDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    seed: int

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def d_feat(self) -> int:
        return int(self.features.shape[1])

    def class_sizes(self) -> dict[int, int]:
        counts = np.bincount(self.labels, minlength=self.class_count)
        return {c: int(counts[c]) for c in range(self.class_count)}

    def subset(self, indices) -> "BlobDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return BlobDataset(self.features[indices], self.labels[indices], self.class_count, self.seed)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"f{j}" for j in range(self.d_feat)] + ["label"])
            for x, y in zip(self.features, self.labels):
                writer.writerow([repr(float(v)) for v in x] + [int(y)])


def _class_counts(n: int, class_count: int, imbalance: float | None) -> np.ndarray:
    if imbalance is None:
        weights = np.ones(class_count)
    else:
        weights = imbalance ** np.arange(class_count, dtype=np.float64)
    ideal = n * weights / weights.sum()
    counts = np.floor(ideal).astype(np.int64)
    order = np.lexsort((np.arange(class_count), -(ideal - counts)))
    counts[order[: n - counts.sum()]] += 1
    return counts


def make_blobs(
    n: int,
    d_feat: int,
    class_count: int,
    cluster_sigma: float,
    seed: int,
    imbalance: float | None = None,
    separation: float = 4.0,
) -> BlobDataset:
    """Isotropic Gaussian blobs around well-separated centers.

    Centers are random orthonormal directions (or random unit vectors when
    there are more classes than features), scaled so that the closest two
    are at least ``max(separation * cluster_sigma, sqrt(2))`` apart.
    ``imbalance=r`` gives class ``c`` a share proportional to ``r**c``.
    Examples are shuffled, so labels are interleaved in index order.
    """
    if class_count < 2:
        raise ConfigError("need at least two classes")
    if n < class_count:
        raise ConfigError(f"n={n} is smaller than class_count={class_count}")
    if imbalance is not None and not 0.0 < imbalance <= 1.0:
        raise ConfigError("imbalance ratio must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((class_count, d_feat))
    if class_count <= d_feat:
        q, r = np.linalg.qr(raw.T)
        unit = (q * np.sign(np.diag(r))).T
    else:
        unit = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    gaps = np.linalg.norm(unit[:, None, :] - unit[None, :, :], axis=2)
    min_gap = gaps[np.triu_indices(class_count, 1)].min()
    scale = max(1.0, separation * cluster_sigma / min_gap)
    centers = scale * unit
    counts = _class_counts(n, class_count, imbalance)
    labels = np.repeat(np.arange(class_count), counts)
    features = centers[labels] + cluster_sigma * rng.standard_normal((n, d_feat))
    perm = rng.permutation(n)
    return BlobDataset(features[perm], labels[perm].astype(np.int64), class_count, seed)


@dataclass
class LogRegModel:
    weights: np.ndarray  # class_count x d_feat
    bias: np.ndarray

    @classmethod
    def zeros(cls, class_count: int, d_feat: int) -> "LogRegModel":
        return cls(np.zeros((class_count, d_feat)), np.zeros(class_count))

    @property
    def param_count(self) -> int:
        return self.weights.size + self.bias.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    @classmethod
    def from_flat(cls, theta, class_count: int, d_feat: int) -> "LogRegModel":
        theta = np.asarray(theta, dtype=np.float64)
        split = class_count * d_feat
        return cls(theta[:split].reshape(class_count, d_feat).copy(), theta[split:].copy())

    def probabilities(self, x) -> np.ndarray:
        logits = np.asarray(x) @ self.weights.T + self.bias
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.probabilities(x), axis=1)

    def losses(self, x, y) -> np.ndarray:
        logits = np.asarray(x) @ self.weights.T + self.bias
        shift = logits.max(axis=1, keepdims=True)
        lse = shift[:, 0] + np.log(np.exp(logits - shift).sum(axis=1))
        return lse - logits[np.arange(len(y)), y]


def per_example_gradients(model: LogRegModel, x, y) -> np.ndarray:
    """Softmax cross-entropy gradient of every example, weights then bias.

    Row ``i`` is ``vec((p_i - e_{y_i}) x_i^T)`` followed by ``p_i - e_{y_i}``,
    so ``D = class_count * (d_feat + 1)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    resid = model.probabilities(x)
    resid[np.arange(y.shape[0]), y] -= 1.0
    wgrad = (resid[:, :, None] * x[:, None, :]).reshape(x.shape[0], -1)
    return np.concatenate([wgrad, resid], axis=1)


def train_test_indices(n: int, seed: int, test_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    n_test = int(round(test_fraction * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def accuracy(model: LogRegModel, data: BlobDataset) -> float:
    if data.n == 0:
        return float("nan")
    return float(np.mean(model.predict(data.features) == data.labels))


def sgd(model: LogRegModel, data: BlobDataset, epochs: int, lr: float, rng, batch_size: int = 32) -> LogRegModel:
    """Plain mini-batch gradient descent on the mean cross-entropy, in place."""
    for _ in range(epochs):
        order = rng.permutation(data.n)
        for start in range(0, data.n, batch_size):
            batch = order[start : start + batch_size]
            g = per_example_gradients(model, data.features[batch], data.labels[batch]).mean(axis=0)
            theta = model.flat() - lr * g
            updated = LogRegModel.from_flat(theta, data.class_count, data.d_feat)
            model.weights, model.bias = updated.weights, updated.bias
        if not (np.all(np.isfinite(model.weights)) and np.all(np.isfinite(model.bias))):
            raise DataError("training diverged to non-finite parameters")
    return model


def train_logreg(
    data: BlobDataset,
    subset=None,
    epochs: int = 20,
    lr: float = 0.1,
    seed: int = 0,
    batch_size: int = 32,
) -> tuple[LogRegModel, float]:
    """Train on (a subset of) the 80% split and report held-out top-1 accuracy.

    ``subset`` holds positions *within the training split* (as produced by
    selection over :func:`training_gradients`), or ``None`` for all of it.
    """
    train_idx, test_idx = train_test_indices(data.n, seed)
    train = data.subset(train_idx)
    if subset is not None:
        subset = np.asarray(getattr(subset, "indices", subset), dtype=np.int64)
        if subset.size == 0:
            raise BudgetError("cannot train on an empty subset")
        if subset.min() < 0 or subset.max() >= train.n:
            raise BudgetError("subset indices fall outside the training split")
        train = train.subset(subset)
    model = LogRegModel.zeros(data.class_count, data.d_feat)
    sgd(model, train, epochs, lr, np.random.default_rng([seed, 1]), batch_size)
    return model, accuracy(model, data.subset(test_idx))


def warmup_model(data: BlobDataset, seed: int, fraction: float = 0.1, lr: float = 0.1) -> LogRegModel:
    """Parameter snapshot for gradient scoring: one epoch on a random slice of the training split."""
    train_idx, _ = train_test_indices(data.n, seed)
    train = data.subset(train_idx)
    rng = np.random.default_rng([seed, 2])
    picked = np.sort(rng.choice(train.n, size=max(1, int(round(fraction * train.n))), replace=False))
    model = LogRegModel.zeros(data.class_count, data.d_feat)
    return sgd(model, train.subset(picked), 1, lr, rng)


def training_gradients(data: BlobDataset, seed: int, model: LogRegModel | None = None):
    """Per-example gradients and labels over the training split at the warmup snapshot."""
    train_idx, _ = train_test_indices(data.n, seed)
    train = data.subset(train_idx)
    if model is None:
        model = warmup_model(data, seed)
    return per_example_gradients(model, train.features, train.labels), train.labels
