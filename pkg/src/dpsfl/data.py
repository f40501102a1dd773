"""Dataset loading, synthesis, and client partitioning."""

from __future__ import annotations

import gzip
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IngestError

_IMAGE_MAGIC = 0x00000803
_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Feature matrix plus labels. num_classes 0 marks a regression task,
    in which case labels are float targets."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ConfigurationError(f"features must be 2-d, got shape {self.features.shape}")
        if len(self.labels) != len(self.features):
            raise ConfigurationError(
                f"{len(self.features)} rows but {len(self.labels)} labels"
            )
        if self.num_classes < 0:
            raise ConfigurationError(f"num_classes must be >= 0, got {self.num_classes}")
        if self.num_classes:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) and self.labels.max() >= self.num_classes:
                raise ConfigurationError(
                    f"label {self.labels.max()} out of range for {self.num_classes} classes"
                )
        else:
            self.labels = np.asarray(self.labels, dtype=np.float64)

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]


def _read_maybe_gzip(path: str | Path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IngestError(f"{path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError, zlib.error) as exc:
            raise IngestError(f"{path}: bad gzip stream ({exc})") from exc
    return raw


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Image/label pair in IDX format, transparently gunzipped.

    Pixels are flattened row-major and scaled into [0, 1]. Every structural
    problem (magic, truncation, count mismatch) raises IngestError naming
    the offending file.
    """
    img = _read_maybe_gzip(images_path)
    if len(img) < 16:
        raise IngestError(f"{images_path}: truncated header")
    magic, n, rows, cols = struct.unpack_from(">IIII", img)
    if magic != _IMAGE_MAGIC:
        raise IngestError(f"{images_path}: bad magic 0x{magic:08x}")
    if len(img) != 16 + n * rows * cols:
        raise IngestError(
            f"{images_path}: expected {16 + n * rows * cols} bytes, got {len(img)}"
        )
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, rows * cols)

    lab = _read_maybe_gzip(labels_path)
    if len(lab) < 8:
        raise IngestError(f"{labels_path}: truncated header")
    magic, n_labels = struct.unpack_from(">II", lab)
    if magic != _LABEL_MAGIC:
        raise IngestError(f"{labels_path}: bad magic 0x{magic:08x}")
    if len(lab) != 8 + n_labels:
        raise IngestError(f"{labels_path}: expected {8 + n_labels} bytes, got {len(lab)}")
    if n_labels != n:
        raise IngestError(
            f"{labels_path}: {n_labels} labels for {n} images in {images_path}"
        )
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    num_classes = int(labels.max()) + 1 if n else 0
    return Dataset(pixels.astype(np.float64) / 255.0, labels, num_classes)


def synthesize(
    kind: str,
    num_samples: int,
    input_dim: int,
    num_classes: int,
    seed: int,
    separation: float = 6.0,
    informative_dims: int | None = None,
) -> Dataset:
    """Deterministic synthetic data.

    "blobs" draws one Gaussian cluster per class; class centers have norm
    separation/2 and live on `informative_dims` coordinates (all of them by
    default), so the signal can be concentrated while the ambient dimension
    stays high. "linreg" is a noisy linear response for regression runs.
    """
    if num_samples < 1:
        raise ConfigurationError(f"num_samples must be >= 1, got {num_samples}")
    if input_dim < 1:
        raise ConfigurationError(f"input_dim must be >= 1, got {input_dim}")
    rng = np.random.default_rng(seed)

    if kind == "blobs":
        if num_classes < 2:
            raise ConfigurationError(f"blobs needs >= 2 classes, got {num_classes}")
        active = input_dim if informative_dims is None else int(informative_dims)
        if not 1 <= active <= input_dim:
            raise ConfigurationError(
                f"informative_dims must be in [1, {input_dim}], got {active}"
            )
        centers = np.zeros((num_classes, input_dim))
        directions = rng.normal(size=(num_classes, active))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        centers[:, :active] = directions * (separation / 2.0)
        labels = np.arange(num_samples) % num_classes
        features = centers[labels] + rng.normal(size=(num_samples, input_dim))
        return Dataset(features, labels, num_classes)

    if kind == "linreg":
        if num_classes != 0:
            raise ConfigurationError("linreg is a regression task; num_classes must be 0")
        weights = rng.normal(size=input_dim) / np.sqrt(input_dim)
        features = rng.normal(size=(num_samples, input_dim))
        targets = features @ weights + 0.1 * rng.normal(size=num_samples)
        return Dataset(features, targets, 0)

    raise ConfigurationError(f"unknown synthetic dataset kind {kind!r}")


@dataclass
class ClientPartition:
    """Disjoint sample index sets, one per client, each non-empty."""

    client_indices: list[np.ndarray]
    kind: str

    def __post_init__(self):
        for i, idx in enumerate(self.client_indices):
            if len(idx) == 0:
                raise ConfigurationError(f"client {i} received no samples")

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)


def partition(
    dataset: Dataset, num_clients: int, kind: str, seed: int, alpha: float = 0.5
) -> ClientPartition:
    """Split sample indices across clients.

    "iid" shuffles and deals near-equal shares. "label_skew" draws each
    client's class mixture from Dirichlet(alpha); small alpha concentrates
    each client on few classes. Every client ends up with at least one
    sample either way.
    """
    if num_clients < 1:
        raise ConfigurationError(f"num_clients must be >= 1, got {num_clients}")
    if num_clients > dataset.n:
        raise ConfigurationError(f"{num_clients} clients need at least as many samples")
    rng = np.random.default_rng(seed)

    if kind == "iid":
        shares = np.array_split(rng.permutation(dataset.n), num_clients)
        return ClientPartition([np.sort(s) for s in shares], kind)

    if kind == "label_skew":
        if not dataset.num_classes:
            raise ConfigurationError("label_skew requires a classification dataset")
        if not (alpha > 0 and np.isfinite(alpha)):
            raise ConfigurationError(f"alpha must be positive, got {alpha}")
        mixtures = rng.dirichlet(np.full(dataset.num_classes, alpha), size=num_clients)
        buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for cls in range(dataset.num_classes):
            members = rng.permutation(np.flatnonzero(dataset.labels == cls))
            if len(members) == 0:
                continue
            weights = mixtures[:, cls] / mixtures[:, cls].sum()
            # cumulative rounding so class counts are preserved exactly
            cuts = np.floor(np.cumsum(weights) * len(members) + 0.5).astype(np.int64)
            start = 0
            for client, stop in enumerate(cuts):
                buckets[client].append(members[start:stop])
                start = stop
        shares = [np.sort(np.concatenate(b)) if b else np.array([], dtype=np.int64)
                  for b in buckets]
        _fill_empty_clients(shares, rng)
        return ClientPartition(shares, kind)

    raise ConfigurationError(f"unknown partition kind {kind!r}")


def _fill_empty_clients(shares: list[np.ndarray], rng: np.random.Generator) -> None:
    """Move one sample from the largest share into each empty one."""
    for i, share in enumerate(shares):
        if len(share):
            continue
        donor = max(range(len(shares)), key=lambda j: len(shares[j]))
        if len(shares[donor]) < 2:
            raise ConfigurationError("not enough samples to give every client one")
        pick = rng.integers(len(shares[donor]))
        shares[i] = shares[donor][pick : pick + 1]
        shares[donor] = np.delete(shares[donor], pick)


def client_dataset(dataset: Dataset, part: ClientPartition, client: int) -> Dataset:
    idx = part.client_indices[client]
    return Dataset(dataset.features[idx], dataset.labels[idx], dataset.num_classes)
