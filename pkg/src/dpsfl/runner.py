"""Experiment execution: one directory per run, delimited summaries on top.

Output layout under the experiment directory:

    <out>/<run name>/records.csv   per-round records
    <out>/<run name>/config.yaml   fully resolved config for that run
    <out>/runs.csv                 one row per run
    <out>/summary.csv              per-cell mean and spread over repetitions

Workers come from DPSFL_WORKERS (default 1); rows are written in plan
order no matter how execution interleaves, so reruns diff cleanly.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentSpec, RunPlan, build_run, dump_config, materialize_runs
from .engine import run
from .metrics import write_records

log = logging.getLogger(__name__)

WORKERS_ENV = "DPSFL_WORKERS"

RUNS_COLUMNS = (
    "name",
    "cell",
    "rep",
    "status",
    "rounds_done",
    "final_loss",
    "final_acc",
    "final_C",
    "rho_spent",
    "epsilon_equiv",
    "bytes_up",
    "bytes_down",
    "CL",
    "note",
)

SUMMARY_COLUMNS = (
    "cell",
    "reps",
    "final_acc_mean",
    "final_acc_std",
    "final_loss_mean",
    "final_loss_std",
    "final_CL",
)


def execute_plan(plan: RunPlan, out_root: str) -> dict:
    """Run one plan to completion; never raises, reports through status."""
    run_dir = Path(out_root) / plan.name
    row = {k: "" for k in RUNS_COLUMNS}
    row.update(name=plan.name, cell=plan.cell, rep=plan.rep)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.yaml").write_text(dump_config(plan.config))
        run_config, dataset, part, eval_dataset = build_run(plan.config)
        records, state = run(run_config, dataset, part, eval_dataset, return_state=True)
        write_records(run_dir / "records.csv", records, footer=state.stop_reason)
        row["rounds_done"] = str(len(records))
        row["note"] = state.stop_reason or ""
        if records:
            last = records[-1]
            row.update(
                final_loss=repr(last.loss),
                final_acc=repr(last.accuracy),
                final_C=repr(last.clip_threshold),
                rho_spent=repr(last.rho_spent),
                epsilon_equiv=repr(last.epsilon_spent),
                bytes_up=str(last.bytes_up),
                bytes_down=str(last.bytes_down),
                CL=repr(last.compression_level),
            )
        row["status"] = "ok"
    except Exception as exc:  # noqa: BLE001 - one bad run must not kill the sweep
        log.error("run %s failed: %s", plan.name, exc)
        row["status"] = "failed"
        row["note"] = str(exc)
    return row


def _write_csv(path: Path, columns: tuple[str, ...], rows: list[dict]) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_csv_escape(str(row.get(c, ""))) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def _csv_escape(text: str) -> str:
    if "," in text or '"' in text or "\n" in text:
        return '"' + text.replace('"', '""') + '"'
    return text


def _summarize(rows: list[dict], plans: list[RunPlan]) -> list[dict]:
    cells = []
    for plan in plans:
        if plan.cell not in cells:
            cells.append(plan.cell)
    out = []
    for cell in cells:
        ok = [r for r in rows if r["cell"] == cell and r["status"] == "ok" and r["final_acc"]]
        if not ok:
            out.append({"cell": cell, "reps": 0})
            continue
        acc = np.array([float(r["final_acc"]) for r in ok])
        loss = np.array([float(r["final_loss"]) for r in ok])
        out.append(
            {
                "cell": cell,
                "reps": len(ok),
                "final_acc_mean": repr(float(acc.mean())),
                "final_acc_std": repr(float(acc.std(ddof=1)) if len(ok) > 1 else 0.0),
                "final_loss_mean": repr(float(loss.mean())),
                "final_loss_std": repr(float(loss.std(ddof=1)) if len(ok) > 1 else 0.0),
                "final_CL": ok[0]["CL"],
            }
        )
    return out


def run_experiments(
    spec: ExperimentSpec, out_dir: str | Path | None = None, workers: int | None = None
) -> int:
    """Execute every planned run; 0 when all succeeded, 1 otherwise."""
    out_root = Path(out_dir if out_dir is not None else spec.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    plans = materialize_runs(spec)
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    log.info("%d runs across %d workers -> %s", len(plans), max(workers, 1), out_root)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(execute_plan, plans, [str(out_root)] * len(plans)))
    else:
        rows = [execute_plan(plan, str(out_root)) for plan in plans]

    _write_csv(out_root / "runs.csv", RUNS_COLUMNS, rows)
    _write_csv(out_root / "summary.csv", SUMMARY_COLUMNS, _summarize(rows, plans))

    failed = [r["name"] for r in rows if r["status"] != "ok"]
    for name in failed:
        log.error("failed: %s", name)
    return 1 if failed else 0
