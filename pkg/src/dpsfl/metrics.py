"""Per-round records, byte accounting, and the delimited record format.

Records are written as plain CSV with a fixed column set so downstream
tooling can diff files byte-for-byte. Floats are rendered with repr, the
shortest string that round-trips, which keeps output deterministic across
runs without pinning a precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .sketch import HEADER_BYTES

CSV_COLUMNS = (
    "t",
    "loss",
    "acc",
    "C",
    "b_bar",
    "rho_spent",
    "epsilon_equiv",
    "bytes_up",
    "bytes_down",
    "CL",
)


@dataclass(frozen=True)
class RoundRecord:
    """One evaluated round. Byte counters and rho_spent are cumulative
    through this round; mean_bit is None on rounds without a bit release."""

    round_index: int
    loss: float
    accuracy: float
    clip_threshold: float
    mean_bit: float | None
    rho_spent: float
    epsilon_spent: float
    bytes_up: int
    bytes_down: int
    compression_level: float

    def as_row(self) -> list[str]:
        bit = "nan" if self.mean_bit is None else repr(float(self.mean_bit))
        return [
            str(self.round_index),
            repr(float(self.loss)),
            repr(float(self.accuracy)),
            repr(float(self.clip_threshold)),
            bit,
            repr(float(self.rho_spent)),
            repr(float(self.epsilon_spent)),
            str(self.bytes_up),
            str(self.bytes_down),
            repr(float(self.compression_level)),
        ]


def write_records(path: str | Path, records: list[RoundRecord], footer: str | None = None) -> None:
    """Write records as CSV; an optional footer comment carries run notes
    (early stops and the like) without touching the column contract."""
    lines = [",".join(CSV_COLUMNS)]
    lines += [",".join(r.as_row()) for r in records]
    if footer:
        lines.append(f"# {footer}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_records(path: str | Path) -> list[RoundRecord]:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0] != ",".join(CSV_COLUMNS):
        raise ConfigurationError(f"{path}: not a round-record file")
    out = []
    for line in text[1:]:
        if line.startswith("#") or not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(CSV_COLUMNS):
            raise ConfigurationError(f"{path}: malformed row {line!r}")
        bit = float(parts[4])
        out.append(
            RoundRecord(
                round_index=int(parts[0]),
                loss=float(parts[1]),
                accuracy=float(parts[2]),
                clip_threshold=float(parts[3]),
                mean_bit=None if math.isnan(bit) else bit,
                rho_spent=float(parts[5]),
                epsilon_spent=float(parts[6]),
                bytes_up=int(parts[7]),
                bytes_down=int(parts[8]),
                compression_level=float(parts[9]),
            )
        )
    return out


def read_footer(path: str | Path) -> str | None:
    for line in reversed(Path(path).read_text().strip().splitlines()):
        if line.startswith("# "):
            return line[2:]
    return None


# -- byte accounting ---------------------------------------------------------

SPARSE_ENTRY_BYTES = 12  # 4-byte index + 8-byte value
FLOAT_BYTES = 8


def sketch_message_bytes(rows: int, cols: int) -> int:
    """Upload size of one serialized sketch."""
    return HEADER_BYTES + FLOAT_BYTES * rows * cols


def sparse_update_bytes(k: int) -> int:
    """Broadcast size of a k-entry sparse model delta."""
    return SPARSE_ENTRY_BYTES * k


def dense_vector_bytes(dim: int) -> int:
    return FLOAT_BYTES * dim


def baseline_bytes_per_round(dim: int, clients_per_round: int) -> int:
    """Uncompressed FedAvg traffic: a dense vector up and down per client."""
    return 2 * FLOAT_BYTES * dim * clients_per_round


def compression_level(baseline_bytes: int, actual_bytes: int) -> float:
    """How many times cheaper than the baseline the method has been so far."""
    if baseline_bytes < 0 or actual_bytes <= 0:
        raise ConfigurationError(
            f"byte totals must be positive, got baseline={baseline_bytes} actual={actual_bytes}"
        )
    return baseline_bytes / actual_bytes


def summarize_final(records_by_rep: list[list[RoundRecord]]) -> dict[str, float]:
    """Mean and spread of the last-round metrics across repetitions."""
    finals = [reps[-1] for reps in records_by_rep if reps]
    if not finals:
        raise ConfigurationError("no completed rounds to summarize")
    acc = np.array([r.accuracy for r in finals])
    loss = np.array([r.loss for r in finals])
    return {
        "reps": len(finals),
        "final_acc_mean": float(acc.mean()),
        "final_acc_std": float(acc.std(ddof=1)) if len(finals) > 1 else 0.0,
        "final_loss_mean": float(loss.mean()),
        "final_loss_std": float(loss.std(ddof=1)) if len(finals) > 1 else 0.0,
        "final_cl": float(finals[0].compression_level),
        "rho_spent": float(finals[0].rho_spent),
    }
