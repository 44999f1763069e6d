"""Datasets: LIBSVM ingestion, synthetic generators, preprocessing, partitioning.

A :class:`Dataset` keeps its features either as a dense ``(n, d)`` array or a
CSR matrix, in real (float64) or fixed (raw int64) mode.  Labels are stored as
read; :meth:`Dataset.labels_for` maps them to a loss's convention.

Shuffles and synthetic draws use numpy's Philox4x64-10 counter-based bit
generator keyed by the integer seed.  The shuffle is an explicit Fisher-Yates
pass (see :func:`permutation`) so the order does not depend on numpy's
higher-level sampling routines.
"""
from __future__ import annotations

import gzip
import io
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from . import fixedpoint as fx
from .fixedpoint import ConfigurationError, FixedFormat

DENSE = "dense"
SPARSE = "sparse"


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, line: int, column: int, message: str):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class NonMonotonicIndex(DataError):
    def __init__(self, line: int, message: str = "feature indices must be strictly ascending"):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyDataset(DataError):
    pass


class UnsupportedLayout(DataError):
    pass


@dataclass(frozen=True)
class DenseSample:
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class SparseSample:
    indices: np.ndarray
    values: np.ndarray
    label: int

    def densify(self, d: int) -> np.ndarray:
        out = np.zeros(d, dtype=self.values.dtype)
        out[self.indices] = self.values
        return out


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray | sp.csr_matrix
    y: np.ndarray
    fmt: FixedFormat | None = None
    dropped: int = 0

    def __post_init__(self):
        if self.X.shape[0] == 0:
            raise EmptyDataset("dataset has no samples")
        if self.X.shape[0] != len(self.y):
            raise DataError("feature rows and labels differ in length")

    @property
    def layout(self) -> str:
        return SPARSE if sp.issparse(self.X) else DENSE

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def is_fixed(self) -> bool:
        return self.fmt is not None

    def __len__(self):
        return self.n

    def sample(self, i: int) -> DenseSample | SparseSample:
        if self.layout == DENSE:
            return DenseSample(self.X[i].copy(), int(self.y[i]))
        row = self.X[i]
        return SparseSample(row.indices.copy(), row.data.copy(), int(self.y[i]))

    def samples(self):
        for i in range(self.n):
            yield self.sample(i)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, X=self.X[idx], y=self.y[idx])

    def slice(self, start: int, stop: int) -> "Dataset":
        return replace(self, X=self.X[start:stop], y=self.y[start:stop])

    def labels_for(self, loss: str) -> np.ndarray:
        """Labels in the convention of ``loss``: {0,1} for logistic, {-1,1} for hinge."""
        pos = self.y > 0
        if loss == "hinge":
            return np.where(pos, 1, -1).astype(np.int64)
        return pos.astype(np.int64)

    def densified(self) -> "Dataset":
        if self.layout == DENSE:
            return self
        return replace(self, X=np.asarray(self.X.todense()))

    def sample_bytes(self, rows: int = 1) -> int:
        """Stored bytes for ``rows`` average samples (4-byte words, label included)."""
        if self.layout == DENSE:
            return rows * 4 * (self.d + 1)
        nnz = self.X.nnz * rows // self.n
        return 8 * nnz + 4 * rows

    def batch_bytes(self, start: int, stop: int) -> int:
        if self.layout == DENSE:
            return (stop - start) * 4 * (self.d + 1)
        nnz = int(self.X.indptr[stop] - self.X.indptr[start])
        return 8 * nnz + 4 * (stop - start)


def from_samples(samples: Sequence[DenseSample | SparseSample], d: int | None = None) -> Dataset:
    if not samples:
        raise EmptyDataset("no samples")
    y = np.array([s.label for s in samples], dtype=np.int64)
    if isinstance(samples[0], DenseSample):
        X = np.vstack([np.asarray(s.features, dtype=np.float64) for s in samples])
        if d is not None and X.shape[1] != d:
            raise DataError(f"feature length {X.shape[1]} != declared d={d}")
        return Dataset(X, y)
    indptr = np.zeros(len(samples) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(s.indices) for s in samples])
    indices = np.concatenate([np.asarray(s.indices, dtype=np.int64) for s in samples]) if indptr[-1] else np.zeros(0, np.int64)
    values = np.concatenate([np.asarray(s.values, dtype=np.float64) for s in samples]) if indptr[-1] else np.zeros(0)
    max_idx = int(indices.max()) if indices.size else -1
    if d is None:
        d = max_idx + 1 if max_idx >= 0 else 1
    elif max_idx >= d:
        raise DataError(f"feature index {max_idx} outside declared d={d}")
    return Dataset(sp.csr_matrix((values, indices, indptr), shape=(len(samples), d)), y)


# ---------------------------------------------------------------------------
# LIBSVM text format

def _parse_label(tok: str, lineno: int) -> int:
    try:
        v = float(tok)
        integral = v == int(v)
    except (ValueError, OverflowError):
        raise ParseError(lineno, 1, f"bad label {tok!r}") from None
    if not integral:
        raise ParseError(lineno, 1, f"label {tok!r} is not integral")
    return int(v)


def parse_libsvm(stream: Iterable[str] | str, d: int | None = None) -> Dataset:
    """Parse ``<label> <idx>:<val> ...`` lines into a sparse real dataset.

    Indices are used as given (0-based or 1-based files both load; the column
    count is ``1 + max index`` unless ``d`` overrides it).  Blank lines and
    ``#`` comments are skipped.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    labels: list[int] = []
    indptr = [0]
    indices: list[int] = []
    values: list[float] = []
    for lineno, line in enumerate(stream, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        toks = body.split()
        labels.append(_parse_label(toks[0], lineno))
        prev = -1
        col = len(toks[0]) + 2
        for tok in toks[1:]:
            idx_s, sep, val_s = tok.partition(":")
            try:
                if not sep:
                    raise ValueError
                idx = int(idx_s)
                val = float(val_s)
                if idx < 0:
                    raise ValueError
            except ValueError:
                raise ParseError(lineno, col, f"malformed feature {tok!r}") from None
            if idx <= prev:
                raise NonMonotonicIndex(lineno)
            prev = idx
            indices.append(idx)
            values.append(val)
            col += len(tok) + 1
        indptr.append(len(indices))
    if not labels:
        raise EmptyDataset("LIBSVM stream contained no samples")
    max_idx = max(indices) if indices else -1
    if d is None:
        d = max(max_idx + 1, 1)
    elif max_idx >= d:
        raise DataError(f"feature index {max_idx} outside declared d={d}")
    X = sp.csr_matrix((np.array(values, dtype=np.float64), np.array(indices, dtype=np.int64),
                       np.array(indptr, dtype=np.int64)), shape=(len(labels), d))
    return Dataset(X, np.array(labels, dtype=np.int64))


def load_libsvm(path: str | os.PathLike, d: int | None = None) -> Dataset:
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rt", encoding="utf-8") as fh:
        return parse_libsvm(fh, d=d)


def dump_libsvm(ds: Dataset) -> str:
    """Serialize a real-mode dataset; zeros are omitted, floats use repr."""
    if ds.is_fixed:
        raise DataError("dump_libsvm expects a real-mode dataset")
    X = ds.X if ds.layout == SPARSE else sp.csr_matrix(ds.X)
    X = sp.csr_matrix(X)
    X.sort_indices()
    lines = []
    for i in range(ds.n):
        lo, hi = X.indptr[i], X.indptr[i + 1]
        feats = " ".join(f"{int(j)}:{float(v)!r}" for j, v in zip(X.indices[lo:hi], X.data[lo:hi]))
        lines.append(f"{int(ds.y[i])} {feats}".rstrip())
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# randomness

def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & ((1 << 64) - 1)))


def derive_seed(seed: int, *tags: int) -> int:
    """Deterministic child seed from a parent seed and integer tags."""
    ss = np.random.SeedSequence([int(seed) & ((1 << 64) - 1), *(int(t) for t in tags)])
    return int(ss.generate_state(1, np.uint64)[0])


def permutation(n: int, seed: int) -> np.ndarray:
    """Fisher-Yates permutation of ``range(n)`` driven by Philox4x64-10.

    For i = n-1 .. 1 the swap partner is ``j = (u >> 32) * (i + 1) >> 32``
    where ``u`` is the next raw 64-bit Philox output.
    """
    perm = np.arange(n, dtype=np.int64)
    if n < 2:
        return perm
    bitgen = np.random.Philox(key=int(seed) & ((1 << 64) - 1))
    raw = bitgen.random_raw(n - 1) >> np.uint64(32)
    bounds = np.arange(n, 1, -1, dtype=np.uint64)
    js = ((raw * bounds) >> np.uint64(32)).astype(np.int64)
    for i, j in zip(range(n - 1, 0, -1), js.tolist()):
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def shuffle(ds: Dataset, seed: int) -> Dataset:
    return ds.take(permutation(ds.n, seed))


# ---------------------------------------------------------------------------
# synthetic data

def generate_synthetic(d: int, n: int, mean_shift: float, seed: int) -> Dataset:
    """Two unit-variance Gaussians centred at +/- mean_shift * 1/sqrt(d).

    Labels alternate +1, -1, ... so a dataset is a prefix of any larger one
    drawn with the same seed.
    """
    if d < 1 or n < 2 or n % 2:
        raise ConfigurationError(f"need d >= 1 and even n >= 2, got d={d}, n={n}")
    noise = rng(seed).standard_normal((n, d))
    y = np.where(np.arange(n) % 2 == 0, 1, -1).astype(np.int64)
    X = noise + (mean_shift / np.sqrt(d)) * y[:, None]
    return Dataset(X, y)


def generate_synthetic_sparse(d: int, n: int, fields: int, seed: int,
                              positive_rate: float = 0.25, signal: float = 1.0) -> Dataset:
    """Categorical one-hot samples: ``fields`` active indices per row, value 1.

    Each field owns a contiguous block of ``d // fields`` columns.  A hidden
    linear score over the columns decides the label, thresholded so that
    roughly ``positive_rate`` of rows are positive.
    """
    if fields < 1 or d < fields or n < 2:
        raise ConfigurationError(f"invalid sparse synthetic sizes d={d}, n={n}, fields={fields}")
    g = rng(seed)
    block = d // fields
    hidden = g.standard_normal(d) * signal
    cols = g.integers(0, block, size=(n, fields)) + np.arange(fields) * block
    scores = hidden[cols].sum(axis=1) + g.standard_normal(n)
    thresh = np.quantile(scores, 1.0 - positive_rate)
    y = np.where(scores > thresh, 1, -1).astype(np.int64)
    indptr = np.arange(n + 1, dtype=np.int64) * fields
    X = sp.csr_matrix((np.ones(n * fields), cols.ravel().astype(np.int64), indptr), shape=(n, d))
    return Dataset(X, y)


# ---------------------------------------------------------------------------
# preprocessing

@dataclass(frozen=True)
class ColumnStats:
    mean: np.ndarray
    std: np.ndarray


def column_stats(ds: Dataset) -> ColumnStats:
    if ds.layout != DENSE:
        raise UnsupportedLayout("column normalization needs a dense dataset")
    return ColumnStats(ds.X.mean(axis=0), ds.X.std(axis=0))


def normalize_columns(ds: Dataset, stats: ColumnStats | None = None) -> Dataset:
    """Standardize columns to mean 0 / std 1 (population std).

    Zero-variance columns become all-zero.  Pass ``stats`` from the training
    set to apply the same transform to a test set.
    """
    if ds.layout != DENSE:
        raise UnsupportedLayout("column normalization needs a dense dataset")
    if ds.is_fixed:
        raise DataError("normalize before quantizing")
    stats = column_stats(ds) if stats is None else stats
    std = stats.std
    safe = np.where(std > 0, std, 1.0)
    X = (ds.X - stats.mean) / safe
    X[:, std <= 0] = 0.0
    return replace(ds, X=X)


def quantize(ds: Dataset, fmt: FixedFormat = fx.Q16_16) -> Dataset:
    if ds.is_fixed:
        raise DataError("dataset is already quantized")
    if ds.layout == DENSE:
        return replace(ds, X=fx.encode(ds.X, fmt), fmt=fmt)
    X = ds.X.copy()
    X.data = fx.encode(X.data, fmt)
    return replace(ds, X=X, fmt=fmt)


# ---------------------------------------------------------------------------
# partitioning

CONTIGUOUS = "contiguous"
BATCH_SHARD = "batch_shard"


@dataclass(frozen=True)
class PartitionPlan:
    scheme: str
    num_workers: int
    batch_size: int | None
    # contiguous: one (start, stop) per worker
    # batch_shard: per batch, one (start, stop) per worker
    assignments: tuple = field(repr=False)
    dropped: int = 0

    @property
    def num_batches(self) -> int:
        return len(self.assignments) if self.scheme == BATCH_SHARD else 0

    def worker_range(self, k: int) -> tuple[int, int]:
        return self.assignments[k]


def _count(ds_or_n) -> int:
    return ds_or_n if isinstance(ds_or_n, (int, np.integer)) else len(ds_or_n)


def partition_contiguous(ds_or_n, num_workers: int, batch_size: int | None = None) -> PartitionPlan:
    n = _count(ds_or_n)
    if num_workers < 1:
        raise ConfigurationError("need at least one worker")
    if num_workers > n:
        raise ConfigurationError(f"{num_workers} workers for {n} samples")
    per = n // num_workers
    ranges = tuple((k * per, (k + 1) * per) for k in range(num_workers))
    return PartitionPlan(CONTIGUOUS, num_workers, batch_size, ranges, n - per * num_workers)


def partition_batch_shards(ds_or_n, num_workers: int, batch_size: int) -> PartitionPlan:
    n = _count(ds_or_n)
    if num_workers < 1 or batch_size < 1:
        raise ConfigurationError("need at least one worker and a positive batch size")
    if batch_size % num_workers:
        raise ConfigurationError(f"batch size {batch_size} not divisible by {num_workers} workers")
    if batch_size > n:
        raise ConfigurationError(f"batch size {batch_size} exceeds {n} samples")
    shard = batch_size // num_workers
    batches = n // batch_size
    plan = tuple(
        tuple((j * batch_size + k * shard, j * batch_size + (k + 1) * shard) for k in range(num_workers))
        for j in range(batches))
    return PartitionPlan(BATCH_SHARD, num_workers, batch_size, plan, n - batches * batch_size)
