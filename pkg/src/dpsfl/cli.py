"""Command-line front end.

Verbs:
    run              one training run from a config file
    sweep            the full sweep grid with repetitions
    validate-config  parse and check a config without running it
    selftest         fast invariant checks on the installed package
    report           render figures for a finished sweep directory

Exit codes: 0 success, 1 failed runs or checks, 2 invalid config/usage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import build_run, dump_config, materialize_runs, parse_config, run_config_from
from .engine import run as run_training
from .errors import ConfigurationError, IngestError
from .metrics import write_records
from .runner import run_experiments
from .selftest import run_selftest

log = logging.getLogger("dpsfl")


def _add_config_flags(parser: argparse.ArgumentParser, with_overrides: bool = True) -> None:
    parser.add_argument("--config", required=True, help="experiment YAML file")
    if with_overrides:
        parser.add_argument("--out", help="output directory (overrides output.dir)")
        parser.add_argument("--seed", type=int, help="override run.run_seed")
        parser.add_argument("--variant", help="override run.variant")
        parser.add_argument("--rounds", type=int, help="override run.rounds")


def _load_spec(args: argparse.Namespace):
    spec = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        spec.base["run"]["run_seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        spec.base["run"]["variant"] = args.variant
    if getattr(args, "rounds", None) is not None:
        spec.base["run"]["rounds"] = args.rounds
    if getattr(args, "out", None) is not None:
        spec.out_dir = args.out
    return spec


def _cmd_run(args: argparse.Namespace) -> int:
    spec = _load_spec(args)
    if spec.axes or spec.paired:
        log.info("config has a sweep section; 'run' executes the base config only")
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_config, dataset, part, eval_dataset = build_run(spec.base)
    records, state = run_training(
        run_config, dataset, part, eval_dataset, return_state=True
    )
    write_records(out_dir / "records.csv", records, footer=state.stop_reason)
    (out_dir / "config.yaml").write_text(dump_config(spec.base))
    if state.stop_reason:
        log.info("stopped early: %s", state.stop_reason)
    if records:
        last = records[-1]
        log.info(
            "finished %d rounds: loss=%.6g acc=%.4g CL=%.4g",
            len(records),
            last.loss,
            last.accuracy,
            last.compression_level,
        )
    print(out_dir / "records.csv")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    spec = _load_spec(args)
    return run_experiments(spec)


def _cmd_validate(args: argparse.Namespace) -> int:
    spec = parse_config(args.config)
    plans = materialize_runs(spec)
    for plan in plans:
        # full flag validation without touching any dataset files
        run_config_from(plan.config).validate()
    print(f"ok: {len(plans)} runs planned")
    return 0


def _cmd_selftest(args: argparse.Namespace) -> int:
    return 0 if run_selftest() else 1


def _cmd_report(args: argparse.Namespace) -> int:
    from .plotting import render_report

    written = render_report(args.out, args.figures)
    for path in written:
        print(path)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="dpsfl",
        description="Federated learning with sketch-compressed private updates",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute one training run")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="execute the config's sweep grid")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("validate-config", help="check a config file and exit")
    _add_config_flags(p, with_overrides=False)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("selftest", help="run fast invariant checks")
    p.set_defaults(func=_cmd_selftest)

    p = sub.add_parser("report", help="render figures for a sweep directory")
    p.add_argument("--out", required=True, help="directory holding runs.csv")
    p.add_argument("--figures", help="where to write figures (default <out>/figures)")
    p.set_defaults(func=_cmd_report)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr
    )
    try:
        return args.func(args)
    except (ConfigurationError, IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last resort, keep the exit code contract
        log.exception("unhandled failure: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
