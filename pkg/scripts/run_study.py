"""Run the full comparison: baselines, then every schedule under both buffer modes.

    python scripts/run_study.py --out runs/ [--suite disjoint] [--seeds 0,1,2,3,4]

Writes JSONL logs, checkpoints, and report.json / report.csv into ``--out``.
The shared suite uses obs_dim=128 unless ``--obs-dim`` is given.
"""

import argparse
import time
from pathlib import Path

from arrowlab.config import ExperimentConfig
from arrowlab.harness import compare_sample_efficiency, compute_report, run_baselines, run_continual, write_report

SCHEDULES = ("default", "reversed", "two_cycle")
MODES = ("augmented", "fifo_only")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--suite", choices=["disjoint", "shared", "both"], default="both")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--obs-dim", type=int)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")]
    suites = ["disjoint", "shared"] if args.suite == "both" else [args.suite]

    reports, se = [], {}
    for suite in suites:
        obs_dim = args.obs_dim or (128 if suite == "shared" else ExperimentConfig().obs_dim)
        cfg = ExperimentConfig(suite=suite, seeds=seeds, obs_dim=obs_dim)
        t0 = time.perf_counter()
        base = run_baselines(cfg, args.out)
        print(f"{suite} baselines: {time.perf_counter() - t0:.0f}s", flush=True)
        for schedule in SCHEDULES:
            group = []
            for mode in MODES:
                t0 = time.perf_counter()
                runs = run_continual(cfg.replace(schedule=schedule, buffer_mode=mode), args.out)
                rep = compute_report(runs, base)
                group.append(rep)
                s = rep["summary"]
                line = ", ".join(f"{k} {v['median']:.3f}" for k, v in s.items() if v["median"] is not None)
                print(f"{suite}/{schedule}/{mode} ({time.perf_counter() - t0:.0f}s): {line}", flush=True)
            reports += group
            se[f"{suite}/{schedule}"] = compare_sample_efficiency(group)
    write_report(reports, args.out / "report.json", args.out / "report.csv", {"sample_efficiency": se})


if __name__ == "__main__":
    main()
