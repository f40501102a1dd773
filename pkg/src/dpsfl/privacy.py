"""Gaussian-mechanism calibration and zero-concentrated DP accounting.

Budgets are tracked in zCDP form (rho) because composition is additive
there; conversion to an (epsilon, delta) guarantee happens only at the
edges, via the closed forms

    epsilon = rho + 2 * sqrt(rho * ln(1/delta))
    sqrt(rho) = sqrt(ln(1/delta) + epsilon) - sqrt(ln(1/delta))

A Gaussian release of a sensitivity-Delta quantity with std sigma costs
rho = Delta^2 / (2 sigma^2). Sketching a vector of l2 norm at most C
touches one counter per row with a +/-1 sign, so the sketch itself has
sensitivity C * sqrt(rows).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BudgetExhaustedError, ConfigurationError
from .sketch import CountSketch


def _check_delta(delta: float) -> None:
    if not 0.0 < delta < 1.0:
        raise ConfigurationError(f"delta must be in (0, 1), got {delta}")


def rho_from_epsilon(epsilon: float, delta: float) -> float:
    """zCDP level whose standard conversion meets (epsilon, delta)-DP."""
    if not (math.isfinite(epsilon) and epsilon > 0):
        raise ConfigurationError(f"epsilon must be positive and finite, got {epsilon}")
    _check_delta(delta)
    log_term = math.log(1.0 / delta)
    sqrt_rho = math.sqrt(log_term + epsilon) - math.sqrt(log_term)
    return sqrt_rho * sqrt_rho


def epsilon_from_rho(rho: float, delta: float) -> float:
    """(epsilon, delta) guarantee implied by a total zCDP level rho."""
    if rho < 0 or not math.isfinite(rho):
        raise ConfigurationError(f"rho must be non-negative and finite, got {rho}")
    _check_delta(delta)
    return rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta))


def sketch_sensitivity(clip_threshold: float, rows: int) -> float:
    """l2 sensitivity of a sketch of one clipped client gradient."""
    if clip_threshold < 0:
        raise ConfigurationError(f"clip threshold must be >= 0, got {clip_threshold}")
    if rows < 1:
        raise ConfigurationError(f"rows must be >= 1, got {rows}")
    return clip_threshold * math.sqrt(rows)


@dataclass(frozen=True)
class NoiseSpec:
    """Calibrated Gaussian release: std, what it protects, what it costs."""

    sigma: float
    sensitivity: float
    rho: float

    def __post_init__(self):
        if self.sigma < 0 or not math.isfinite(self.sigma):
            raise ConfigurationError(f"sigma must be >= 0, got {self.sigma}")
        if self.sensitivity < 0:
            raise ConfigurationError(f"sensitivity must be >= 0, got {self.sensitivity}")
        if not (self.rho > 0 and math.isfinite(self.rho)):
            raise ConfigurationError(f"rho must be positive, got {self.rho}")
        # the Gaussian mechanism identity sigma^2 = sensitivity^2 / (2 rho)
        lhs = self.sigma * self.sigma * 2.0 * self.rho
        rhs = self.sensitivity * self.sensitivity
        if not math.isclose(lhs, rhs, rel_tol=1e-9, abs_tol=1e-12):
            raise ConfigurationError(
                f"inconsistent noise spec: sigma^2 * 2 rho = {lhs}, sensitivity^2 = {rhs}"
            )

    @classmethod
    def zero(cls) -> "NoiseSpec":
        """No-op release for non-private variants; costs nothing, adds nothing."""
        return cls(sigma=0.0, sensitivity=0.0, rho=1.0)


def calibrate_sketch_noise(clip_threshold: float, rows: int, rho: float) -> NoiseSpec:
    """Per-counter noise std for one sketched client release at level rho."""
    if not (rho > 0 and math.isfinite(rho)):
        raise ConfigurationError(f"rho must be positive and finite, got {rho}")
    sens = sketch_sensitivity(clip_threshold, rows)
    sigma = clip_threshold * math.sqrt(rows / (2.0 * rho))
    return NoiseSpec(sigma=sigma, sensitivity=sens, rho=rho)


def calibrate_dense_noise(clip_threshold: float, rho: float) -> NoiseSpec:
    """Per-coordinate noise std for releasing a clipped gradient directly."""
    if not (rho > 0 and math.isfinite(rho)):
        raise ConfigurationError(f"rho must be positive and finite, got {rho}")
    sigma = clip_threshold * math.sqrt(1.0 / (2.0 * rho))
    return NoiseSpec(sigma=sigma, sensitivity=clip_threshold, rho=rho)


def bit_release_rho(noise_std: float) -> float:
    """zCDP cost of releasing one sensitivity-1 scalar with N(0, noise_std^2)."""
    if not (noise_std > 0 and math.isfinite(noise_std)):
        raise ConfigurationError(
            f"bit noise std must be positive for a private release, got {noise_std}"
        )
    return 1.0 / (2.0 * noise_std * noise_std)


def add_gaussian_noise(sketch: CountSketch, spec: NoiseSpec, seed: int) -> CountSketch:
    """Sketch plus iid N(0, sigma^2) on every counter.

    With sigma = 0 the input sketch is returned as-is and no RNG state is
    consumed, so a zero-noise private run is bit-identical to its
    non-private counterpart.
    """
    if spec.sigma == 0.0:
        return sketch
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, spec.sigma, size=sketch.counters.shape)
    return CountSketch(sketch.config, sketch.counters + noise)


@dataclass
class PrivacyAccountant:
    """Cumulative zCDP ledger for one run.

    rho_spent is a plain running sum of accepted costs, so it equals the
    sequential float sum of every spend exactly. A spend that would push
    past rho_total raises and leaves the state untouched.
    """

    rho_total: float
    per_round_rho: float = 0.0
    bit_rho_per_round: float = 0.0
    rho_spent: float = 0.0

    def __post_init__(self):
        for name in ("rho_total", "per_round_rho", "bit_rho_per_round", "rho_spent"):
            value = getattr(self, name)
            if value < 0 or not math.isfinite(value):
                raise ConfigurationError(f"{name} must be >= 0 and finite, got {value}")

    @property
    def remaining(self) -> float:
        return self.rho_total - self.rho_spent

    def spend(self, rho_cost: float) -> "PrivacyAccountant":
        if rho_cost < 0 or not math.isfinite(rho_cost):
            raise ConfigurationError(f"spend must be >= 0 and finite, got {rho_cost}")
        if self.rho_spent + rho_cost > self.rho_total:
            raise BudgetExhaustedError(
                f"spend of {rho_cost} exceeds remaining budget {self.remaining}"
            )
        self.rho_spent += rho_cost
        return self

    def epsilon_spent(self, delta: float) -> float:
        return epsilon_from_rho(self.rho_spent, delta)


def spend(accountant: PrivacyAccountant, rho_cost: float) -> PrivacyAccountant:
    return accountant.spend(rho_cost)


def noimp_diagnostic(rho: float, tau: float, delta_sketch: float) -> float:
    """Scale-free ratio of injected noise power to the heavy-hitter floor.

    Large values mean the calibrated noise dominates what the sketch must
    resolve; useful as a feasibility check before committing to a run.
    """
    if not (rho > 0 and math.isfinite(rho)):
        raise ConfigurationError(f"rho must be positive and finite, got {rho}")
    if not 0.0 < tau <= 1.0:
        raise ConfigurationError(f"tau must be in (0, 1], got {tau}")
    if not 0.0 < delta_sketch < 1.0:
        raise ConfigurationError(f"delta_sketch must be in (0, 1), got {delta_sketch}")
    log_term = math.log(1.0 / delta_sketch)
    inner = (2.0 / tau) * log_term / delta_sketch
    return (1.0 / (rho * tau)) * log_term * math.log(inner)
