"""Small differentiable models over flat parameter vectors.

Every model exposes its parameters as one float64 vector so the training
loop, sketches, and updates can stay model-agnostic. Shapes are carved out
of the flat vector on the fly; gradients come back flat as well.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

_KINDS = ("linear", "logistic", "mlp")
_KIND_CODES = {k: i + 1 for i, k in enumerate(_KINDS)}

# magic, kind code, input_dim, output_dim, hidden_dim, param count
_CKPT_HEADER = struct.Struct("<4sBQQQQ")
_CKPT_MAGIC = b"MDL1"


@dataclass(frozen=True)
class Architecture:
    """What the flat parameter vector means.

    kind "linear" is least-squares regression (output_dim fixed at 1),
    "logistic" is multinomial softmax classification, "mlp" adds one tanh
    hidden layer of hidden_dim units before the softmax.
    """

    kind: str
    input_dim: int
    output_dim: int
    hidden_dim: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}, expected one of {_KINDS}")
        if self.input_dim < 1:
            raise ConfigurationError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.kind == "linear":
            if self.output_dim != 1:
                raise ConfigurationError("linear regression has output_dim 1")
        elif self.output_dim < 2:
            raise ConfigurationError(f"classification needs >= 2 classes, got {self.output_dim}")
        if self.kind == "mlp":
            if self.hidden_dim < 1:
                raise ConfigurationError(f"mlp needs hidden_dim >= 1, got {self.hidden_dim}")
        elif self.hidden_dim != 0:
            raise ConfigurationError(f"hidden_dim is only meaningful for mlp")

    @property
    def param_count(self) -> int:
        if self.kind == "linear":
            return self.input_dim + 1
        if self.kind == "logistic":
            return self.output_dim * self.input_dim + self.output_dim
        h, i, o = self.hidden_dim, self.input_dim, self.output_dim
        return h * i + h + o * h + o


@dataclass
class ModelParams:
    arch: Architecture
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.arch.param_count,):
            raise ConfigurationError(
                f"expected {self.arch.param_count} parameters, got shape {self.values.shape}"
            )


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ConfigurationError(f"features must be 2-d, got shape {self.features.shape}")
        if len(self.labels) != len(self.features):
            raise ConfigurationError(
                f"{len(self.features)} rows but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.features)


def init_params(arch: Architecture, seed: int) -> ModelParams:
    """Zeros for the convex models, uniform Glorot fan-scaling for the mlp."""
    if arch.kind != "mlp":
        return ModelParams(arch, np.zeros(arch.param_count))
    rng = np.random.default_rng(seed)
    h, i, o = arch.hidden_dim, arch.input_dim, arch.output_dim
    w1 = rng.uniform(-1, 1, size=(h, i)) * np.sqrt(6.0 / (i + h))
    w2 = rng.uniform(-1, 1, size=(o, h)) * np.sqrt(6.0 / (h + o))
    values = np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(o)])
    return ModelParams(arch, values)


def _unpack_linear(arch, v):
    return v[: arch.input_dim], v[arch.input_dim]


def _unpack_logistic(arch, v):
    o, i = arch.output_dim, arch.input_dim
    return v[: o * i].reshape(o, i), v[o * i :]


def _unpack_mlp(arch, v):
    h, i, o = arch.hidden_dim, arch.input_dim, arch.output_dim
    parts = np.split(v, np.cumsum([h * i, h, o * h]))
    return parts[0].reshape(h, i), parts[1], parts[2].reshape(o, h), parts[3]


def _logits(params: ModelParams, x: np.ndarray) -> np.ndarray:
    arch = params.arch
    if arch.kind == "logistic":
        w, b = _unpack_logistic(arch, params.values)
        return x @ w.T + b
    w1, b1, w2, b2 = _unpack_mlp(arch, params.values)
    hidden = np.tanh(x @ w1.T + b1)
    return hidden @ w2.T + b2


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(arch: Architecture, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if arch.kind == "linear":
        return labels.astype(np.float64)
    labels = labels.astype(np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() >= arch.output_dim):
        raise ConfigurationError(
            f"labels must lie in [0, {arch.output_dim}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels


def loss_and_gradient(params: ModelParams, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its flat gradient.

    Loss is mean squared error for "linear" and mean cross-entropy (natural
    log) for the classifiers.
    """
    arch = params.arch
    x = batch.features
    if x.shape[1] != arch.input_dim:
        raise ConfigurationError(f"features have {x.shape[1]} columns, expected {arch.input_dim}")
    if len(batch) == 0:
        raise ConfigurationError("empty batch")
    y = _check_labels(arch, batch.labels)
    n = len(batch)

    if arch.kind == "linear":
        w, b = _unpack_linear(arch, params.values)
        residual = x @ w + b - y
        loss = float(np.mean(residual**2))
        grad = np.concatenate([(2.0 / n) * (x.T @ residual), [(2.0 / n) * residual.sum()]])
        return loss, grad

    logits = _logits(params, x)
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), y].mean())
    # dL/dlogits, already averaged over the batch
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n

    if arch.kind == "logistic":
        grad = np.concatenate([(dlogits.T @ x).ravel(), dlogits.sum(axis=0)])
        return loss, grad

    w1, b1, w2, b2 = _unpack_mlp(arch, params.values)
    hidden = np.tanh(x @ w1.T + b1)
    dhidden = (dlogits @ w2) * (1.0 - hidden**2)
    grad = np.concatenate(
        [
            (dhidden.T @ x).ravel(),
            dhidden.sum(axis=0),
            (dlogits.T @ hidden).ravel(),
            dlogits.sum(axis=0),
        ]
    )
    return loss, grad


def evaluate_loss(params: ModelParams, batch: Batch) -> float:
    loss, _ = loss_and_gradient(params, batch)
    return loss


def evaluate_accuracy(params: ModelParams, batch: Batch) -> float:
    """Fraction of argmax predictions matching the labels."""
    if params.arch.kind == "linear":
        raise ConfigurationError("accuracy is only defined for classifiers")
    if len(batch) == 0:
        raise ConfigurationError("empty batch")
    y = _check_labels(params.arch, batch.labels)
    pred = np.argmax(_logits(params, batch.features), axis=1)
    return float(np.mean(pred == y))


def apply_update(params: ModelParams, indices: np.ndarray, values: np.ndarray) -> ModelParams:
    """New parameters with `values` subtracted at `indices`."""
    indices = np.asarray(indices, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if indices.shape != values.shape:
        raise ConfigurationError("indices and values must have matching shapes")
    if len(indices) and (indices.min() < 0 or indices.max() >= params.arch.param_count):
        raise ConfigurationError("update index out of range")
    out = params.values.copy()
    np.subtract.at(out, indices, values)
    return ModelParams(params.arch, out)


def params_to_bytes(params: ModelParams) -> bytes:
    arch = params.arch
    header = _CKPT_HEADER.pack(
        _CKPT_MAGIC,
        _KIND_CODES[arch.kind],
        arch.input_dim,
        arch.output_dim,
        arch.hidden_dim,
        arch.param_count,
    )
    return header + params.values.astype("<f8").tobytes()


def params_from_bytes(data: bytes) -> ModelParams:
    if len(data) < _CKPT_HEADER.size or data[:4] != _CKPT_MAGIC:
        raise ConfigurationError("not a model checkpoint")
    magic, code, input_dim, output_dim, hidden_dim, count = _CKPT_HEADER.unpack_from(data)
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if code not in kinds:
        raise ConfigurationError(f"unknown model kind code {code}")
    arch = Architecture(kinds[code], input_dim, output_dim, hidden_dim)
    expected = _CKPT_HEADER.size + 8 * arch.param_count
    if arch.param_count != count or len(data) != expected:
        raise ConfigurationError("checkpoint length does not match its header")
    values = np.frombuffer(data, dtype="<f8", offset=_CKPT_HEADER.size)
    return ModelParams(arch, values.copy())
