"""Experiment configs: YAML parsing, validation, sweep materialization.

A config file is a nested mapping layered over DEFAULTS; an empty file is
a valid experiment. Unknown keys anywhere are rejected with their dotted
path so typos fail loudly instead of silently running the defaults.
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import Dataset, partition, synthesize, load_idx
from .engine import RunConfig
from .errors import ConfigFileError
from .hashing import derive_seed

DEFAULTS: dict = {
    "run": {
        "variant": "dpsfl",
        "rounds": 100,
        "total_clients": 100,
        "clients_per_round": 50,
        "batch_size": 32,
        "learning_rate": 0.05,
        "momentum": 0.9,
        "run_seed": 0,
    },
    "sketch": {
        "rows": 5,
        "cols": 500_000,
        "topk": 50_000,
        "seed": None,
    },
    "privacy": {
        "epsilon": 4.0,
        "delta": 1e-5,
        "bit_accounting": "strict",
    },
    "clip": {
        "threshold": 1.5,
        "target_rate": 0.9,
        "impact_bound": 0.5,
        "adjust_rate": 0.01,
        "bit_noise_std": 0.1,
    },
    "model": {
        "kind": "mlp",
        "hidden_dim": 64,
    },
    "dataset": {
        "kind": "blobs",
        "path": None,
        "labels_path": None,
        "eval_path": None,
        "eval_labels_path": None,
        "num_samples": 10_000,
        "eval_samples": 2_000,
        "input_dim": 784,
        "num_classes": 10,
        "separation": 6.0,
        "informative_dims": None,
        "seed": 0,
    },
    "partition": {
        "kind": "iid",
        "alpha": 0.5,
    },
    "report": {
        "baseline_bytes": None,
    },
}

# leaf name -> (python type, may be null); bool is rejected where a number
# is expected since YAML happily parses "on" and "yes" as booleans
_LEAF_TYPES = {
    ("run", "variant"): (str, False),
    ("run", "rounds"): (int, False),
    ("run", "total_clients"): (int, False),
    ("run", "clients_per_round"): (int, False),
    ("run", "batch_size"): (int, False),
    ("run", "learning_rate"): (float, False),
    ("run", "momentum"): (float, False),
    ("run", "run_seed"): (int, False),
    ("sketch", "rows"): (int, False),
    ("sketch", "cols"): (int, False),
    ("sketch", "topk"): (int, False),
    ("sketch", "seed"): (int, True),
    ("privacy", "epsilon"): (float, True),
    ("privacy", "delta"): (float, False),
    ("privacy", "bit_accounting"): (str, False),
    ("clip", "threshold"): (float, False),
    ("clip", "target_rate"): (float, False),
    ("clip", "impact_bound"): (float, False),
    ("clip", "adjust_rate"): (float, False),
    ("clip", "bit_noise_std"): (float, False),
    ("model", "kind"): (str, False),
    ("model", "hidden_dim"): (int, False),
    ("dataset", "kind"): (str, False),
    ("dataset", "path"): (str, True),
    ("dataset", "labels_path"): (str, True),
    ("dataset", "eval_path"): (str, True),
    ("dataset", "eval_labels_path"): (str, True),
    ("dataset", "num_samples"): (int, False),
    ("dataset", "eval_samples"): (int, False),
    ("dataset", "input_dim"): (int, False),
    ("dataset", "num_classes"): (int, False),
    ("dataset", "separation"): (float, False),
    ("dataset", "informative_dims"): (int, True),
    ("dataset", "seed"): (int, False),
    ("partition", "kind"): (str, False),
    ("partition", "alpha"): (float, False),
    ("report", "baseline_bytes"): (int, True),
}


@dataclass
class ExperimentSpec:
    """A validated experiment: resolved base config plus the sweep grid."""

    base: dict
    axes: dict[str, list] = field(default_factory=dict)
    paired: dict[str, list] = field(default_factory=dict)
    repetitions: int = 1
    out_dir: str = "results"


@dataclass(frozen=True)
class RunPlan:
    """One concrete run inside an experiment."""

    name: str
    cell: str
    rep: int
    config: dict  # resolved nested config with the run seed already set
    overrides: dict


def _coerce_leaf(path: str, value, expected: type, nullable: bool):
    if value is None:
        if nullable:
            return None
        raise ConfigFileError(f"{path} must not be null")
    if isinstance(value, bool):
        raise ConfigFileError(f"{path}: booleans are not valid here, got {value}")
    if expected is float and isinstance(value, int):
        return float(value)
    if not isinstance(value, expected):
        raise ConfigFileError(
            f"{path} must be {expected.__name__}, got {type(value).__name__} {value!r}"
        )
    return value


def _merge_section(section: str, defaults: dict, override: dict) -> dict:
    if not isinstance(override, dict):
        raise ConfigFileError(f"{section} must be a mapping, got {type(override).__name__}")
    merged = dict(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise ConfigFileError(f"unknown key {section}.{key}")
        expected, nullable = _LEAF_TYPES[(section, key)]
        merged[key] = _coerce_leaf(f"{section}.{key}", value, expected, nullable)
    return merged


def _validate_dotted(key: str) -> tuple[str, str]:
    parts = key.split(".")
    if len(parts) != 2 or tuple(parts) not in _LEAF_TYPES:
        raise ConfigFileError(f"sweep key {key!r} is not a config leaf")
    return parts[0], parts[1]


def _parse_sweep(raw: dict) -> tuple[dict, dict, int]:
    axes: dict[str, list] = {}
    paired: dict[str, list] = {}
    reps = 1
    for key, value in raw.items():
        if key == "repetitions":
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigFileError(f"sweep.repetitions must be a positive int, got {value!r}")
            reps = value
        elif key in ("axes", "paired"):
            target = axes if key == "axes" else paired
            if not isinstance(value, dict):
                raise ConfigFileError(f"sweep.{key} must be a mapping")
            for dotted, values in value.items():
                section, leaf = _validate_dotted(dotted)
                if not isinstance(values, list) or not values:
                    raise ConfigFileError(f"sweep.{key}.{dotted} must be a non-empty list")
                expected, nullable = _LEAF_TYPES[(section, leaf)]
                target[dotted] = [
                    _coerce_leaf(f"sweep.{key}.{dotted}", v, expected, nullable) for v in values
                ]
        else:
            raise ConfigFileError(f"unknown key sweep.{key}")
    if paired:
        lengths = {len(v) for v in paired.values()}
        if len(lengths) > 1:
            raise ConfigFileError(f"sweep.paired lists must share one length, got {lengths}")
    overlap = set(axes) & set(paired)
    if overlap:
        raise ConfigFileError(f"keys cannot be both crossed and paired: {sorted(overlap)}")
    return axes, paired, reps


def parse_config(path: str | Path) -> ExperimentSpec:
    """Load, default, and validate one experiment file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigFileError(f"{path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ConfigFileError(f"{where}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigFileError(f"{path}: top level must be a mapping")

    base: dict = {}
    axes: dict = {}
    paired: dict = {}
    reps = 1
    out_dir = "results"
    for key, value in raw.items():
        if key in DEFAULTS:
            base[key] = value
        elif key == "sweep":
            if not isinstance(value, dict):
                raise ConfigFileError("sweep must be a mapping")
            axes, paired, reps = _parse_sweep(value)
        elif key == "output":
            if not isinstance(value, dict) or set(value) - {"dir"}:
                raise ConfigFileError("output supports only the key 'dir'")
            out_dir = value.get("dir", out_dir)
            if not isinstance(out_dir, str):
                raise ConfigFileError("output.dir must be a string")
        else:
            raise ConfigFileError(f"unknown key {key}")

    merged = {
        section: _merge_section(section, defaults, base.get(section, {}))
        for section, defaults in DEFAULTS.items()
    }
    return ExperimentSpec(base=merged, axes=axes, paired=paired, repetitions=reps, out_dir=out_dir)


def _format_value(value) -> str:
    text = "null" if value is None else str(value)
    return "".join(c if c.isalnum() or c in ".-" else "_" for c in text)


def materialize_runs(spec: ExperimentSpec) -> list[RunPlan]:
    """Expand the sweep grid into concrete seeded runs.

    Every run gets its own seed derived from (base seed, cell, rep), so
    repetitions differ while the whole grid stays reproducible.
    """
    axis_keys = list(spec.axes)
    axis_values = [spec.axes[k] for k in axis_keys]
    paired_keys = list(spec.paired)
    paired_cells = (
        list(zip(*(spec.paired[k] for k in paired_keys))) if paired_keys else [()]
    )

    plans = []
    base_seed = spec.base["run"]["run_seed"]
    cell_index = 0
    for crossed in itertools.product(*axis_values) if axis_keys else [()]:
        for zipped in paired_cells:
            overrides = dict(zip(axis_keys, crossed))
            overrides.update(dict(zip(paired_keys, zipped)))
            parts = [f"{k.split('.')[-1]}={_format_value(v)}" for k, v in overrides.items()]
            cell = "-".join(parts) if parts else "base"
            for rep in range(spec.repetitions):
                config = copy.deepcopy(spec.base)
                for dotted, value in overrides.items():
                    section, leaf = dotted.split(".")
                    config[section][leaf] = value
                config["run"]["run_seed"] = derive_seed(base_seed, "cell", cell_index, "rep", rep)
                plans.append(
                    RunPlan(
                        name=f"{cell}_rep{rep}",
                        cell=cell,
                        rep=rep,
                        config=config,
                        overrides=overrides,
                    )
                )
            cell_index += 1
    return plans


def build_run(config: dict) -> tuple[RunConfig, Dataset, object, Dataset | None]:
    """Turn one resolved config into runnable pieces.

    Returns (run config, train data, partition, eval data or None). The
    partition seed derives from the dataset seed, not the run seed, so
    repetitions share the same client split.
    """
    ds_cfg = config["dataset"]
    eval_dataset = None
    if ds_cfg["kind"] in ("blobs", "linreg"):
        common = dict(
            kind=ds_cfg["kind"],
            input_dim=ds_cfg["input_dim"],
            num_classes=ds_cfg["num_classes"] if ds_cfg["kind"] == "blobs" else 0,
            separation=ds_cfg["separation"],
            informative_dims=ds_cfg["informative_dims"],
        )
        # one pool, then split: train and eval must share the generating
        # parameters (class centers, regression weights), not just the kind
        n = ds_cfg["num_samples"]
        n_eval = ds_cfg["eval_samples"]
        pool = synthesize(num_samples=n + n_eval, seed=ds_cfg["seed"], **common)
        dataset = Dataset(pool.features[:n], pool.labels[:n], pool.num_classes)
        if n_eval > 0:
            eval_dataset = Dataset(pool.features[n:], pool.labels[n:], pool.num_classes)
    elif ds_cfg["kind"] == "idx":
        if not ds_cfg["path"] or not ds_cfg["labels_path"]:
            raise ConfigFileError("dataset.kind 'idx' needs dataset.path and dataset.labels_path")
        dataset = load_idx(ds_cfg["path"], ds_cfg["labels_path"])
        if ds_cfg["eval_path"]:
            if not ds_cfg["eval_labels_path"]:
                raise ConfigFileError("dataset.eval_path needs dataset.eval_labels_path")
            eval_dataset = load_idx(ds_cfg["eval_path"], ds_cfg["eval_labels_path"])
    else:
        raise ConfigFileError(f"unknown dataset.kind {ds_cfg['kind']!r}")

    part = partition(
        dataset,
        num_clients=config["run"]["total_clients"],
        kind=config["partition"]["kind"],
        seed=derive_seed(ds_cfg["seed"], "partition"),
        alpha=config["partition"]["alpha"],
    )
    return run_config_from(config), dataset, part, eval_dataset


def run_config_from(config: dict) -> RunConfig:
    """Map a resolved nested config onto the engine's flat run config."""
    return RunConfig(
        variant=config["run"]["variant"],
        rounds=config["run"]["rounds"],
        total_clients=config["run"]["total_clients"],
        clients_per_round=config["run"]["clients_per_round"],
        batch_size=config["run"]["batch_size"],
        learning_rate=config["run"]["learning_rate"],
        momentum=config["run"]["momentum"],
        topk=config["sketch"]["topk"],
        sketch_rows=config["sketch"]["rows"],
        sketch_cols=config["sketch"]["cols"],
        clip_threshold=config["clip"]["threshold"],
        clip_target_rate=config["clip"]["target_rate"],
        clip_impact_bound=config["clip"]["impact_bound"],
        clip_adjust_rate=config["clip"]["adjust_rate"],
        bit_noise_std=config["clip"]["bit_noise_std"],
        epsilon=config["privacy"]["epsilon"],
        delta=config["privacy"]["delta"],
        bit_accounting=config["privacy"]["bit_accounting"],
        model_kind=config["model"]["kind"],
        hidden_dim=config["model"]["hidden_dim"],
        baseline_bytes=config["report"]["baseline_bytes"],
        run_seed=config["run"]["run_seed"],
        sketch_seed=config["sketch"]["seed"],
    )


def dump_config(config: dict) -> str:
    """Deterministic YAML rendering of a resolved config."""
    return yaml.safe_dump(config, sort_keys=True, default_flow_style=False)
