"""Norm clipping and the adaptive threshold controller.

Clipping rescales a gradient to norm at most C without changing its
direction. The controller asks each client for one bit: did clipping leave
the gradient's restriction to the previous round's selected coordinates
essentially intact? The noisy mean of those bits steers C geometrically
toward the rate target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class ClippingState:
    """Current threshold plus the fixed controller constants."""

    threshold: float
    target_rate: float = 0.9
    impact_bound: float = 0.5
    adjust_rate: float = 0.01
    bit_noise_std: float = 0.1

    def __post_init__(self):
        if not (self.threshold > 0 and math.isfinite(self.threshold)):
            raise ConfigurationError(f"threshold must be positive, got {self.threshold}")
        if not 0.0 < self.target_rate < 1.0:
            raise ConfigurationError(f"target_rate must be in (0, 1), got {self.target_rate}")
        if not 0.0 < self.impact_bound < 1.0:
            raise ConfigurationError(f"impact_bound must be in (0, 1), got {self.impact_bound}")
        if self.adjust_rate < 0 or not math.isfinite(self.adjust_rate):
            raise ConfigurationError(f"adjust_rate must be >= 0, got {self.adjust_rate}")
        if self.bit_noise_std < 0 or not math.isfinite(self.bit_noise_std):
            raise ConfigurationError(f"bit_noise_std must be >= 0, got {self.bit_noise_std}")


def clip(vec: np.ndarray, threshold: float) -> np.ndarray:
    """vec scaled to l2 norm at most threshold; direction unchanged."""
    if not (threshold > 0 and math.isfinite(threshold)):
        raise ConfigurationError(f"threshold must be positive, got {threshold}")
    vec = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    return vec / max(1.0, norm / threshold)


@dataclass(frozen=True)
class ClipImpactBit:
    """One client's clipping-impact report. raw is the exact indicator;
    value is what actually leaves the client (raw plus Gaussian noise)."""

    value: float
    raw: int

    def __post_init__(self):
        if self.raw not in (0, 1):
            raise ConfigurationError(f"raw bit must be 0 or 1, got {self.raw}")
        if not math.isfinite(self.value):
            raise ConfigurationError(f"bit value must be finite, got {self.value}")


def clip_impact_bit(
    vec: np.ndarray,
    threshold: float,
    indices: np.ndarray,
    impact_bound: float,
    noise_std: float,
    seed: int,
) -> ClipImpactBit:
    """Indicator that clipping barely moved vec on the given coordinates.

    The comparison restricts both the raw and the clipped gradient to
    `indices` (the coordinates the server actually extracted last round),
    so the bit measures impact where it matters for the update. noise_std
    of zero releases the exact bit and consumes no RNG state.
    """
    if not 0.0 < impact_bound < 1.0:
        raise ConfigurationError(f"impact_bound must be in (0, 1), got {impact_bound}")
    vec = np.asarray(vec, dtype=np.float64)
    restricted = vec[np.asarray(indices, dtype=np.int64)]
    clipped = clip(vec, threshold)[np.asarray(indices, dtype=np.int64)]
    raw = int(np.linalg.norm(clipped - restricted) <= impact_bound * np.linalg.norm(restricted))
    if noise_std == 0.0:
        return ClipImpactBit(value=float(raw), raw=raw)
    noise = float(np.random.default_rng(seed).normal(0.0, noise_std))
    return ClipImpactBit(value=raw + noise, raw=raw)


def aggregate_bits(bits: list[ClipImpactBit], expected_count: int) -> float:
    """Mean reported bit value across one round's clients."""
    if len(bits) != expected_count:
        raise ConfigurationError(f"expected {expected_count} bits, got {len(bits)}")
    return float(np.mean([b.value for b in bits]))


def update_threshold(state: ClippingState, mean_bit: float) -> ClippingState:
    """Geometric step toward the target rate.

    Mean bit above target means clipping is looser than it needs to be,
    so the threshold shrinks; below target it grows. At the target the
    factor is exactly 1 and the threshold is unchanged bit-for-bit.
    """
    if not math.isfinite(mean_bit):
        raise ConfigurationError(f"mean_bit must be finite, got {mean_bit}")
    factor = math.exp(-state.adjust_rate * (mean_bit - state.target_rate))
    return replace(state, threshold=state.threshold * factor)
