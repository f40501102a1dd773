"""Count-sketch compression of high-dimensional vectors.

A sketch is an l x m grid of float64 counters plus a seeded hash family.
Row j maps coordinate i to one column h_j(i) with a sign xi_j(i); inserting
a vector adds xi_j(i) * g[i] into cell (j, h_j(i)) for every row. The
structure is linear, so sketches of different vectors can be averaged,
scaled, and differenced counter-wise before decoding. Decoding a coordinate
takes the median of its l signed counters.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .hashing import mix64

_MASK64 = (1 << 64) - 1

# l, m, d, master_seed as little-endian unsigned 64-bit
_HEADER = struct.Struct("<QQQQ")
HEADER_BYTES = _HEADER.size


@dataclass(frozen=True)
class SketchConfig:
    """Shape and seeding of a sketch; equal configs hash identically."""

    rows: int
    cols: int
    dim: int
    master_seed: int

    def __post_init__(self):
        if self.rows < 1:
            raise ConfigurationError(f"sketch rows must be >= 1, got {self.rows}")
        if self.cols < 2:
            raise ConfigurationError(f"sketch cols must be >= 2, got {self.cols}")
        if self.dim < 1:
            raise ConfigurationError(f"sketch dim must be >= 1, got {self.dim}")
        object.__setattr__(self, "master_seed", int(self.master_seed) & _MASK64)

    @property
    def num_counters(self) -> int:
        return self.rows * self.cols

    @property
    def byte_size(self) -> int:
        return HEADER_BYTES + 8 * self.num_counters


class HashFamily:
    """Per-row column and sign hashes derived from one master seed.

    Both hashes are splitmix64 mixes of (row salt XOR coordinate), so the
    whole family is a pure function of the master seed.
    """

    def __init__(self, config: SketchConfig):
        self.config = config
        base = mix64(np.uint64(config.master_seed))[()]
        rows = np.arange(config.rows, dtype=np.uint64)
        two = np.uint64(2)
        one = np.uint64(1)
        self._col_salts = mix64(np.uint64(base) ^ (two * rows))
        self._sign_salts = mix64(np.uint64(base) ^ (two * rows + one))
        self._tables = None

    def columns(self, row: int, indices: np.ndarray) -> np.ndarray:
        """Column of each coordinate in `indices` for the given row."""
        mixed = mix64(self._col_salts[row] ^ indices.astype(np.uint64))
        return (mixed % np.uint64(self.config.cols)).astype(np.int64)

    def signs(self, row: int, indices: np.ndarray) -> np.ndarray:
        """Sign (+1.0 / -1.0) of each coordinate for the given row."""
        mixed = mix64(self._sign_salts[row] ^ indices.astype(np.uint64))
        return np.where((mixed & np.uint64(1)).astype(bool), 1.0, -1.0)

    def full_tables(self) -> tuple[np.ndarray, np.ndarray]:
        """(rows, dim) column and sign tables over all coordinates, cached."""
        if self._tables is None:
            idx = np.arange(self.config.dim, dtype=np.uint64)
            cols = np.stack([self.columns(j, idx) for j in range(self.config.rows)])
            signs = np.stack([self.signs(j, idx) for j in range(self.config.rows)])
            self._tables = (cols, signs)
        return self._tables


@functools.lru_cache(maxsize=8)
def family_for(config: SketchConfig) -> HashFamily:
    """Shared hash family per config; caching keeps full tables warm."""
    return HashFamily(config)


@dataclass(frozen=True)
class TopKResult:
    """Estimated heavy coordinates, ordered by |value| descending.

    Ties in magnitude break toward the lower index, so the ordering is a
    deterministic function of the estimates.
    """

    indices: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return [(int(i), float(v)) for i, v in zip(self.indices, self.values)]


@dataclass(eq=False)
class CountSketch:
    """Counter grid bound to its config. Treated as immutable: every
    operation returns a new sketch."""

    config: SketchConfig
    counters: np.ndarray

    def __post_init__(self):
        expected = (self.config.rows, self.config.cols)
        if self.counters.shape != expected:
            raise ConfigurationError(
                f"counter shape {self.counters.shape} does not match config {expected}"
            )
        self.counters = np.ascontiguousarray(self.counters, dtype=np.float64)

    # -- construction ------------------------------------------------------

    @classmethod
    def zeros(cls, config: SketchConfig) -> "CountSketch":
        return cls(config, np.zeros((config.rows, config.cols)))

    @classmethod
    def from_vector(cls, config: SketchConfig, vec: np.ndarray) -> "CountSketch":
        return cls.zeros(config).insert(vec)

    @classmethod
    def from_sparse(
        cls, config: SketchConfig, indices: np.ndarray, values: np.ndarray
    ) -> "CountSketch":
        return cls.zeros(config).insert_sparse(indices, values)

    @property
    def family(self) -> HashFamily:
        return family_for(self.config)

    # -- linear operations -------------------------------------------------

    def insert(self, vec: np.ndarray) -> "CountSketch":
        """Sketch of self plus the dense vector `vec` (length dim)."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.config.dim,):
            raise ConfigurationError(
                f"vector shape {vec.shape} does not match dim {self.config.dim}"
            )
        if not np.all(np.isfinite(vec)):
            raise ConfigurationError("vector contains non-finite values")
        cols, signs = self.family.full_tables()
        out = self.counters.copy()
        for j in range(self.config.rows):
            out[j] += np.bincount(cols[j], weights=signs[j] * vec, minlength=self.config.cols)
        return CountSketch(self.config, out)

    def insert_sparse(self, indices, values) -> "CountSketch":
        """Sketch of self plus a sparse vector given as (indices, values)."""
        indices = np.asarray(indices, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if indices.shape != values.shape or indices.ndim != 1:
            raise ConfigurationError("indices and values must be equal-length 1-d arrays")
        if len(indices) and (indices.min() < 0 or indices.max() >= self.config.dim):
            raise ConfigurationError("sparse index out of range")
        if not np.all(np.isfinite(values)):
            raise ConfigurationError("values contain non-finite entries")
        idx = indices.astype(np.uint64)
        out = self.counters.copy()
        for j in range(self.config.rows):
            cols = self.family.columns(j, idx)
            signed = self.family.signs(j, idx) * values
            out[j] += np.bincount(cols, weights=signed, minlength=self.config.cols)
        return CountSketch(self.config, out)

    def merge(self, other: "CountSketch") -> "CountSketch":
        if self.config != other.config:
            raise ConfigurationError("cannot merge sketches with different configs")
        return CountSketch(self.config, self.counters + other.counters)

    def scale(self, factor: float) -> "CountSketch":
        factor = float(factor)
        if not math.isfinite(factor):
            raise ConfigurationError("scale factor must be finite")
        return CountSketch(self.config, self.counters * factor)

    def __add__(self, other: "CountSketch") -> "CountSketch":
        return self.merge(other)

    def __sub__(self, other: "CountSketch") -> "CountSketch":
        if self.config != other.config:
            raise ConfigurationError("cannot merge sketches with different configs")
        return CountSketch(self.config, self.counters - other.counters)

    def __mul__(self, factor: float) -> "CountSketch":
        return self.scale(factor)

    __rmul__ = __mul__

    # -- decoding ----------------------------------------------------------

    def estimate(self, index: int) -> float:
        """Median-of-rows estimate of one coordinate."""
        if not 0 <= index < self.config.dim:
            raise ConfigurationError(f"index {index} out of range [0, {self.config.dim})")
        idx = np.asarray([index], dtype=np.uint64)
        vals = np.empty(self.config.rows)
        for j in range(self.config.rows):
            col = self.family.columns(j, idx)[0]
            vals[j] = self.family.signs(j, idx)[0] * self.counters[j, col]
        return float(np.median(vals))

    def estimate_all(self) -> np.ndarray:
        """Median-of-rows estimates for every coordinate, shape (dim,)."""
        cols, signs = self.family.full_tables()
        vals = np.empty((self.config.rows, self.config.dim))
        for j in range(self.config.rows):
            vals[j] = signs[j] * self.counters[j, cols[j]]
        return np.median(vals, axis=0)

    def unsketch_topk(self, k: int) -> TopKResult:
        """The k coordinates with the largest |estimate|."""
        if not 1 <= k <= self.config.dim:
            raise ConfigurationError(f"k must be in [1, {self.config.dim}], got {k}")
        est = self.estimate_all()
        # primary key |estimate| descending, secondary key index ascending
        order = np.lexsort((np.arange(self.config.dim), -np.abs(est)))[:k]
        return TopKResult(indices=order.astype(np.int64), values=est[order])

    # -- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(
            self.config.rows, self.config.cols, self.config.dim, self.config.master_seed
        )
        return header + self.counters.astype("<f8").tobytes(order="C")

    @classmethod
    def from_bytes(cls, data: bytes) -> "CountSketch":
        if len(data) < HEADER_BYTES:
            raise ConfigurationError(
                f"sketch blob too short: {len(data)} < {HEADER_BYTES} header bytes"
            )
        rows, cols, dim, master_seed = _HEADER.unpack_from(data)
        config = SketchConfig(rows=rows, cols=cols, dim=dim, master_seed=master_seed)
        expected = HEADER_BYTES + 8 * config.num_counters
        if len(data) != expected:
            raise ConfigurationError(
                f"sketch blob length {len(data)} does not match header ({expected} expected)"
            )
        counters = np.frombuffer(data, dtype="<f8", offset=HEADER_BYTES)
        return cls(config, counters.reshape(rows, cols).copy())


def make_sketch(rows: int, cols: int, dim: int, master_seed: int) -> CountSketch:
    """Empty sketch for the given shape and seed."""
    return CountSketch.zeros(SketchConfig(rows=rows, cols=cols, dim=dim, master_seed=master_seed))


def serialize_sketch(sketch: CountSketch) -> bytes:
    return sketch.to_bytes()


def deserialize_sketch(data: bytes) -> CountSketch:
    return CountSketch.from_bytes(data)


def size_for_heavy_recovery(tau: float, dim: int, failure_prob: float) -> tuple[int, int]:
    """Rows and columns sufficient to recover every tau-heavy coordinate.

    A coordinate is tau-heavy when g[i]^2 >= tau * ||g||^2. Column count
    grows like 2/tau so heavy coordinates dominate their cells; row count
    grows logarithmically to drive the per-coordinate failure rate below
    failure_prob. tau = 1 is the degenerate single-heavy case (m = 2).
    """
    if not 0.0 < tau <= 1.0:
        raise ConfigurationError(f"tau must be in (0, 1], got {tau}")
    if dim < 1:
        raise ConfigurationError(f"dim must be >= 1, got {dim}")
    if not 0.0 < failure_prob < 1.0:
        raise ConfigurationError(f"failure_prob must be in (0, 1), got {failure_prob}")
    rows = max(1, math.ceil(math.log2(dim / failure_prob)))
    cols = max(2, math.ceil(2.0 / tau))
    return rows, cols
