"""Report figures rendered from a finished experiment directory."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigurationError
from .metrics import read_records

_STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
    "legend.fontsize": 8,
}


def _load_runs_table(results_dir: Path) -> list[dict]:
    runs_path = results_dir / "runs.csv"
    if not runs_path.exists():
        raise ConfigurationError(f"{runs_path}: no runs table; run a sweep first")
    with runs_path.open() as fh:
        return [row for row in csv.DictReader(fh)]


def _records_by_cell(results_dir: Path, rows: list[dict]) -> dict[str, list]:
    cells = defaultdict(list)
    for row in rows:
        if row["status"] != "ok":
            continue
        rec_path = results_dir / row["name"] / "records.csv"
        if rec_path.exists():
            cells[row["cell"]].append(read_records(rec_path))
    return cells


def _mean_curve(reps: list[list], attr: str) -> tuple[np.ndarray, np.ndarray]:
    rounds = min(len(r) for r in reps)
    stacked = np.array([[getattr(rec, attr) for rec in r[:rounds]] for r in reps])
    return stacked.mean(axis=0), stacked.std(axis=0)


def render_report(results_dir: str | Path, figures_dir: str | Path | None = None) -> list[Path]:
    """Render every applicable figure; returns the files written."""
    results_dir = Path(results_dir)
    figures_dir = Path(figures_dir) if figures_dir else results_dir / "figures"
    figures_dir.mkdir(parents=True, exist_ok=True)
    rows = _load_runs_table(results_dir)
    cells = _records_by_cell(results_dir, rows)
    if not cells:
        raise ConfigurationError(f"{results_dir}: no completed runs to plot")

    written = []
    plt.rcParams.update(_STYLE)

    fig, ax = plt.subplots()
    for cell, reps in cells.items():
        mean, std = _mean_curve(reps, "accuracy")
        t = np.arange(len(mean))
        (line,) = ax.plot(t, mean, label=cell)
        if len(reps) > 1:
            ax.fill_between(t, mean - std, mean + std, alpha=0.2, color=line.get_color())
    ax.set_xlabel("round")
    ax.set_ylabel("accuracy")
    ax.legend()
    written.append(_save(fig, figures_dir / "accuracy_vs_round.png"))

    fig, ax = plt.subplots()
    for cell, reps in cells.items():
        mean, _ = _mean_curve(reps, "loss")
        ax.plot(np.arange(len(mean)), mean, label=cell)
    ax.set_xlabel("round")
    ax.set_ylabel("loss")
    ax.legend()
    written.append(_save(fig, figures_dir / "loss_vs_round.png"))

    # final accuracy against compression, one point per cell
    finals = {
        cell: (
            float(np.mean([r[-1].compression_level for r in reps])),
            float(np.mean([r[-1].accuracy for r in reps])),
        )
        for cell, reps in cells.items()
        if reps and reps[0]
    }
    if len(finals) > 1:
        fig, ax = plt.subplots()
        for cell, (cl, acc) in sorted(finals.items(), key=lambda kv: kv[1][0]):
            ax.scatter(cl, acc, label=cell)
        ax.set_xlabel("compression level")
        ax.set_ylabel("final accuracy")
        ax.set_xscale("log")
        ax.legend()
        written.append(_save(fig, figures_dir / "accuracy_vs_compression.png"))

    # threshold trajectories, only when some run actually adapted
    moving = {
        cell: reps
        for cell, reps in cells.items()
        if any(len({rec.clip_threshold for rec in r}) > 1 for r in reps)
    }
    if moving:
        fig, ax = plt.subplots()
        for cell, reps in moving.items():
            mean, _ = _mean_curve(reps, "clip_threshold")
            ax.plot(np.arange(len(mean)), mean, label=cell)
        ax.set_xlabel("round")
        ax.set_ylabel("clip threshold")
        ax.legend()
        written.append(_save(fig, figures_dir / "threshold_vs_round.png"))

    return written


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
