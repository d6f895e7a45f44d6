"""Command-line entry point.

    arrowlab suite describe --suite shared
    arrowlab baseline run --config exp.json --out runs/
    arrowlab cl run --config exp.json --buffer-mode fifo_only --out runs/
    arrowlab report --runs runs/cl_*.jsonl --baselines runs/baseline_*.jsonl --out report.json
    arrowlab buffer stats --snapshot runs/cl_..._buffer.npz

Every ExperimentConfig field is also a flag (``--steps-per-task 3000``);
flags override values from ``--config``.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path
from typing import List, Optional

from .agent import RunLog
from .config import CONFIG_SCHEMA, ConfigError, ExperimentConfig
from .envs import describe_suite
from .harness import (HarnessError, build_curriculum, compare_sample_efficiency, compute_report,
                      load_baselines, run_baselines, run_continual, write_report)
from .metrics import DegenerateBaselineError, MetricsError
from .replay import buffer_composition, capacity_observations, load_snapshot

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DEGENERATE = 4
EXIT_METRICS = 5


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    for f in fields(ExperimentConfig):
        if f.name == "schema_version":
            continue
        if f.name in ("seeds", "reward_scales"):
            p.add_argument(_flag(f.name), dest=f.name, default=None, help="comma-separated list")
            continue
        kind = {"int": int, "float": float, "str": str}.get(str(f.type).replace("'", ""), str)
        p.add_argument(_flag(f.name), dest=f.name, type=kind, default=None)


def _config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    for f in fields(ExperimentConfig):
        val = getattr(args, f.name, None)
        if val is None:
            continue
        if f.name == "seeds":
            val = [int(v) for v in val.split(",") if v.strip()]
        elif f.name == "reward_scales":
            val = [float(v) for v in val.split(",") if v.strip()]
        changes[f.name] = val
    return cfg.replace(**changes).validate()


def _emit(doc, out: Optional[Path]) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out is None:
        print(text)
    else:
        out.write_text(text + "\n")


def cmd_suite_describe(args) -> int:
    cfg = _config_from_args(args)
    _emit(describe_suite(build_curriculum(cfg), cfg.obs_dim), args.out)
    return EXIT_OK


def cmd_suite_schema(args) -> int:
    _emit(CONFIG_SCHEMA, args.out)
    return EXIT_OK


def cmd_baseline_run(args) -> int:
    cfg = _config_from_args(args)
    args.out.mkdir(parents=True, exist_ok=True)
    tasks = [int(t) for t in args.tasks.split(",")] if args.tasks else None
    run_baselines(cfg, args.out, tasks)
    return EXIT_OK


def cmd_cl_run(args) -> int:
    cfg = _config_from_args(args)
    args.out.mkdir(parents=True, exist_ok=True)
    run_continual(cfg, args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    # one report per (suite, schedule, buffer_mode) group
    by_key = {}
    for path in args.runs:
        log = RunLog.load(path)
        key = (log.header["suite"], log.header["schedule"], log.header["config"]["buffer_mode"])
        by_key.setdefault(key, {})[int(log.header["seed"])] = log
    baselines = load_baselines(args.baselines)
    reports = [compute_report(group, baselines) for _, group in sorted(by_key.items())]
    by_setting = {}
    for r in reports:
        by_setting.setdefault((r["suite"], r["schedule"]), []).append(r)
    se = {f"{s}/{sch}": compare_sample_efficiency(rs) for (s, sch), rs in sorted(by_setting.items())}
    write_report(reports, args.out, args.csv, {"sample_efficiency": se})
    return EXIT_OK


def cmd_buffer_stats(args) -> int:
    if args.snapshot:
        aug, header = load_snapshot(args.snapshot)
        doc = {
            "fifo_capacity": header["fifo_capacity"],
            "reservoir_capacity": header["reservoir_capacity"],
            "length": header["length"],
            "capacity_observations": capacity_observations(
                header["fifo_capacity"], header["reservoir_capacity"], header["length"]),
            "fifo_size": len(aug.d1),
            "reservoir_size": len(aug.d2),
            "reservoir_seen": aug.d2.seen,
            "fifo_composition": {str(k): v for k, v in buffer_composition(aug.d1).items()},
            "reservoir_composition": {str(k): v for k, v in buffer_composition(aug.d2).items()},
        }
    else:
        cfg = _config_from_args(args)
        c1, c2 = cfg.capacities()
        doc = {"buffer_mode": cfg.buffer_mode, "fifo_capacity": c1, "reservoir_capacity": c2,
               "length": cfg.chunk_length, "capacity_observations": cfg.capacity_observations}
    _emit(doc, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="arrowlab", description="continual model-based RL laboratory")
    sub = ap.add_subparsers(dest="command", required=True)

    suite = sub.add_parser("suite").add_subparsers(dest="action", required=True)
    p = suite.add_parser("describe", help="print the task suite as JSON")
    _add_config_flags(p)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_suite_describe)
    p = suite.add_parser("schema", help="print the config JSON schema")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_suite_schema)

    base = sub.add_parser("baseline").add_subparsers(dest="action", required=True)
    p = base.add_parser("run", help="single-task baselines for every task and seed")
    _add_config_flags(p)
    p.add_argument("--tasks", help="comma-separated task indices (default: all)")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_baseline_run)

    cl = sub.add_parser("cl").add_subparsers(dest="action", required=True)
    p = cl.add_parser("run", help="continual runs for every seed")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_cl_run)

    p = sub.add_parser("report", help="metrics over saved runs")
    p.add_argument("--runs", type=Path, nargs="+", required=True)
    p.add_argument("--baselines", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--csv", type=Path)
    p.set_defaults(func=cmd_report)

    buf = sub.add_parser("buffer").add_subparsers(dest="action", required=True)
    p = buf.add_parser("stats", help="capacity and composition of a buffer")
    _add_config_flags(p)
    p.add_argument("--snapshot", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_buffer_stats)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateBaselineError as e:
        print(f"degenerate baseline: {e}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (OSError, json.JSONDecodeError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (MetricsError, HarnessError) as e:
        print(f"metrics error: {e}", file=sys.stderr)
        return EXIT_METRICS


if __name__ == "__main__":
    sys.exit(main())
