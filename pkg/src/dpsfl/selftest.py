"""Fast invariant checks runnable from the CLI on any install."""

from __future__ import annotations

import math

import numpy as np

from .clipping import ClippingState, clip, update_threshold
from .data import partition, synthesize
from .engine import RunConfig, run
from .errors import BudgetExhaustedError
from .metrics import write_records
from .privacy import (
    PrivacyAccountant,
    calibrate_sketch_noise,
    epsilon_from_rho,
    rho_from_epsilon,
)
from .sketch import CountSketch, SketchConfig, deserialize_sketch


def _check_sketch_linearity():
    cfg = SketchConfig(rows=5, cols=64, dim=200, master_seed=17)
    rng = np.random.default_rng(0)
    for _ in range(20):
        g1, g2 = rng.normal(size=200), rng.normal(size=200)
        a, b = rng.uniform(-2, 2, size=2)
        lhs = (a * CountSketch.from_vector(cfg, g1) + b * CountSketch.from_vector(cfg, g2))
        rhs = CountSketch.from_vector(cfg, a * g1 + b * g2)
        assert np.abs(lhs.counters - rhs.counters).max() < 1e-9


def _check_sketch_decode():
    cfg = SketchConfig(rows=5, cols=128, dim=500, master_seed=3)
    vec = np.zeros(500)
    vec[42] = 7.5
    sketch = CountSketch.from_vector(cfg, vec)
    assert sketch.estimate(42) == 7.5
    top = sketch.unsketch_topk(1)
    assert top.indices[0] == 42

    blob = sketch.to_bytes()
    back = deserialize_sketch(blob)
    assert back.config == cfg and np.array_equal(back.counters, sketch.counters)


def _check_conversions():
    for eps in (0.5, 1.0, 4.0, 10.0):
        for delta in (1e-5, 1e-6):
            rho = rho_from_epsilon(eps, delta)
            assert abs(epsilon_from_rho(rho, delta) - eps) < 1e-9 * eps


def _check_calibration():
    spec = calibrate_sketch_noise(1.5, 5, rho=0.3)
    assert abs(spec.sigma**2 * 2 * spec.rho - spec.sensitivity**2) < 1e-12 * spec.sensitivity**2


def _check_clip():
    rng = np.random.default_rng(1)
    g = rng.normal(size=50) * 10
    out = clip(g, 1.0)
    assert np.linalg.norm(out) <= 1.0 + 1e-12
    state = ClippingState(threshold=2.0)
    assert update_threshold(state, state.target_rate).threshold == 2.0


def _check_accountant():
    acct = PrivacyAccountant(rho_total=1.0)
    total = 0.0
    for c in (0.25, 0.5, 0.125):
        acct.spend(c)
        total += c
    assert acct.rho_spent == total
    try:
        acct.spend(0.2)
    except BudgetExhaustedError:
        pass
    else:
        raise AssertionError("overspend was not rejected")
    assert acct.rho_spent == total


def _tiny_run(variant, epsilon, seed=5):
    data = synthesize("blobs", 60, input_dim=6, num_classes=2, seed=1)
    part = partition(data, 4, "iid", seed=1)
    config = RunConfig(
        variant=variant,
        rounds=4,
        total_clients=4,
        clients_per_round=2,
        batch_size=8,
        learning_rate=0.1,
        momentum=0.9,
        topk=7,
        sketch_rows=3,
        sketch_cols=64,
        clip_threshold=1.0,
        epsilon=epsilon,
        model_kind="logistic",
        run_seed=seed,
    )
    return run(config, data, part)


def _check_noise_degeneracy():
    a = _tiny_run("dpsfl", epsilon=None)
    b = _tiny_run("dpsfl_nonnoise", epsilon=None)
    assert [r.as_row() for r in a] == [r.as_row() for r in b]


def _check_determinism(tmp_dir):
    pa = tmp_dir / "a.csv"
    pb = tmp_dir / "b.csv"
    write_records(pa, _tiny_run("dpsfl", epsilon=2.0))
    write_records(pb, _tiny_run("dpsfl", epsilon=2.0))
    assert pa.read_bytes() == pb.read_bytes()


def run_selftest(verbose: bool = True) -> bool:
    """Run every check; prints one line per check, returns overall health."""
    import tempfile
    from pathlib import Path

    checks = [
        ("sketch linearity", _check_sketch_linearity),
        ("sketch decode and serialization", _check_sketch_decode),
        ("epsilon/rho round trip", _check_conversions),
        ("noise calibration identity", _check_calibration),
        ("clip bound and controller fixed point", _check_clip),
        ("accountant conservation", _check_accountant),
        ("zero noise degeneracy", _check_noise_degeneracy),
    ]
    ok = True
    for name, check in checks:
        try:
            check()
            if verbose:
                print(f"ok   {name}")
        except Exception as exc:  # noqa: BLE001 - report and keep going
            ok = False
            print(f"FAIL {name}: {exc}")
    with tempfile.TemporaryDirectory() as tmp:
        try:
            _check_determinism(Path(tmp))
            if verbose:
                print("ok   record determinism")
        except Exception as exc:  # noqa: BLE001
            ok = False
            print(f"FAIL record determinism: {exc}")
    return ok
