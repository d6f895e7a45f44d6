"""Experiment orchestration: single-task baselines, continual runs and reports.

Runs are keyed by (config, seed) and fully determined by them. Files written
here are plain JSONL/JSON/CSV so they can be inspected or plotted elsewhere.
"""

from __future__ import annotations

import csv
import datetime as _dt
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .agent import RunLog, arrow_train, save_agent
from .config import ExperimentConfig
from .envs import NUM_ACTIONS, Curriculum, make_suite
from .replay import save_snapshot
from .worldmodel import save_model
from .metrics import (BaselineSet, EvalLog, MissingCheckpointError, aggregate_curve,
                      normalize, normalize_baseline, run_metrics, sample_efficiency, summarize,
                      wc_acc_curve)


class HarnessError(Exception):
    pass


class SchemaMismatchError(HarnessError):
    pass


def build_curriculum(config: ExperimentConfig) -> Curriculum:
    config.validate()
    kw = dict(obs_dim=config.obs_dim, steps_per_task=config.steps_per_task, schedule=config.schedule,
              width=config.grid_size, height=config.grid_size, horizon=config.horizon)
    if config.suite == "shared":
        kw["delta_shared"] = config.delta_shared
    else:
        kw["delta_disjoint"] = config.delta_disjoint
        kw["theme_overlap"] = config.theme_overlap
    return make_suite(config.suite, config.suite_seed, **kw)


def baseline_config(config: ExperimentConfig) -> ExperimentConfig:
    """Single-task runs ignore the schedule and always use the augmented buffer,
    so that every comparator is normalised against the same curves."""
    return config.replace(schedule="default", buffer_mode="augmented")


def _run_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


@dataclass
class RunManifest:
    kind: str  # "baseline" or "continual"
    config_hash: str
    config: dict
    files: Dict[str, str] = field(default_factory=dict)  # "<seed>" or "<task>/<seed>" -> file name beside the manifest
    created: str = ""

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def run_single_task(config: ExperimentConfig, task_index: int, seed: int) -> RunLog:
    cfg = baseline_config(config)
    cur = build_curriculum(cfg)
    task = next(t for t in cur.tasks if t.task_index == task_index)
    single = Curriculum([task], cfg.steps_per_task, "default", cur.suite, cur.seed)
    log = arrow_train(single, cfg, _run_rng(seed, 1000 + task_index), seed=seed)
    log.header["run_kind"] = "baseline"
    return log


def run_baselines(config: ExperimentConfig, out_dir=None,
                  tasks: Optional[Sequence[int]] = None) -> Dict[int, List[RunLog]]:
    """Train the agent on each task alone for N frames, once per seed."""
    cfg = baseline_config(config)
    cur = build_curriculum(cfg)
    indices = [t.task_index for t in cur.tasks] if tasks is None else list(tasks)
    out: Dict[int, List[RunLog]] = {}
    manifest = RunManifest("baseline", cfg.config_hash(), cfg.to_dict(), created=_timestamp())
    for ti in indices:
        out[ti] = []
        for seed in cfg.seeds:
            log = run_single_task(cfg, ti, seed)
            out[ti].append(log)
            if out_dir is not None:
                path = Path(out_dir) / f"baseline_{cfg.suite}_t{ti}_s{seed}.jsonl"
                log.save(path)
                manifest.files[f"{ti}/{seed}"] = path.name
    if out_dir is not None:
        manifest.save(Path(out_dir) / f"baseline_{cfg.suite}_manifest.json")
    return out


def run_continual(config: ExperimentConfig, out_dir=None) -> Dict[int, RunLog]:
    cur = build_curriculum(config)
    manifest = RunManifest("continual", config.config_hash(), config.to_dict(), created=_timestamp())
    out = {}
    for seed in config.seeds:
        state: dict = {}
        log = arrow_train(cur, config, _run_rng(seed, 1), seed=seed, state_out=state)
        log.header["run_kind"] = "continual"
        out[seed] = log
        if out_dir is not None:
            path = Path(out_dir) / run_filename(config, seed)
            log.save(path)
            manifest.files[str(seed)] = path.name
            stem = str(path)[: -len(".jsonl")]
            save_model(state["model"], stem + "_model.npz", config.config_hash())
            save_agent(state["agent"], stem + "_agent.npz", config.config_hash())
            manifest.files[f"{seed}/model"] = Path(stem + "_model.npz").name
            manifest.files[f"{seed}/agent"] = Path(stem + "_agent.npz").name
            save_snapshot(state["buffer"], stem + "_buffer.npz", cur.tasks[0].obs_dim, NUM_ACTIONS)
            manifest.files[f"{seed}/buffer"] = Path(stem + "_buffer.npz").name
    if out_dir is not None:
        manifest.save(Path(out_dir) / f"cl_{config.suite}_{config.schedule}_{config.buffer_mode}_manifest.json")
    return out


def run_filename(config: ExperimentConfig, seed: int) -> str:
    return f"cl_{config.suite}_{config.schedule}_{config.buffer_mode}_s{seed}.jsonl"


def baseline_set(baselines: Mapping[int, Sequence[RunLog]], task_order: Sequence[int]) -> BaselineSet:
    """Per-task single-task curves, median across seeds at each checkpoint."""
    curves, names, frames = [], [], None
    for ti in task_order:
        logs = baselines.get(ti)
        if not logs:
            raise MissingCheckpointError(f"missing baseline for task {ti}")
        per_seed = []
        for log in logs:
            el = EvalLog.from_records(log.records, [ti], log.header["steps_per_task"])
            if frames is None:
                frames = el.frames
            elif not np.array_equal(frames, el.frames):
                raise SchemaMismatchError(f"baseline grid of task {ti} differs from the others")
            per_seed.append(el.returns[0])
            name = el.task_names[0]
        curves.append(np.median(np.array(per_seed), axis=0))
        names.append(name)
    return BaselineSet(frames, np.array(curves), names)


def _eval_log(log: RunLog) -> EvalLog:
    h = log.header
    mult = h["config"].get("frame_multiplier", 1)
    return EvalLog.from_records(log.records, h["task_order"], h["steps_per_task"] * mult, h["schedule"])


def _check_compatible(logs: Iterable[RunLog]) -> dict:
    logs = list(logs)
    if not logs:
        raise HarnessError("no runs to report on")
    ref = logs[0].header
    for log in logs[1:]:
        for key in ("config_hash", "task_order", "steps_per_task", "schedule"):
            if log.header.get(key) != ref.get(key):
                raise SchemaMismatchError(f"runs disagree on {key}")
    return ref


def compute_report(runs: Mapping[int, RunLog], baselines: Mapping[int, Sequence[RunLog]],
                   label: str = "") -> dict:
    """Normalise each seed's run, compute its metrics and aggregate across seeds."""
    head = _check_compatible(runs.values())
    order = head["task_order"]
    mult = head["config"].get("frame_multiplier", 1)
    base = baseline_set(baselines, order)
    n_full = head["steps_per_task"] * mult
    nm_st = normalize_baseline(base, n_full)
    per_seed, curves = {}, []
    frames = None
    for seed in sorted(runs):
        nm = normalize(_eval_log(runs[seed]), base, n_full)
        m = run_metrics(nm, nm_st, head["schedule"])
        m["wc_acc_curve"] = None if head["schedule"] == "two_cycle" else wc_acc_curve(nm)
        per_seed[str(seed)] = m
        curves.append(aggregate_curve(nm))
        frames = nm.frames
    scalar_keys = ("forgetting", "forward_transfer", "acc", "min_acc", "wc_acc", "c1_forgetting",
                   "c2_forgetting", "max_f", "recovery")
    summary = {k: summarize(per_seed[s][k] for s in per_seed) for k in scalar_keys}
    curves = np.array(curves)
    return {
        "label": label or f"{head['suite']}/{head['schedule']}/{head['config']['buffer_mode']}",
        "suite": head["suite"],
        "schedule": head["schedule"],
        "buffer_mode": head["config"]["buffer_mode"],
        "config_hash": head["config_hash"],
        "capacity_observations": head["capacity_observations"],
        "total_frames": head["total_frames"] * mult,
        "task_names": head["task_names"],
        "seeds": [int(s) for s in per_seed],
        "summary": summary,
        "per_seed": per_seed,
        "frames": [int(f) for f in frames],
        "aggregate_curve": {
            "median": np.median(curves, axis=0).tolist(),
            "q25": np.percentile(curves, 25, axis=0).tolist(),
            "q75": np.percentile(curves, 75, axis=0).tolist(),
        },
        "_curves": curves.tolist(),
    }


def compare_sample_efficiency(reports: Sequence[dict]) -> dict:
    """SE across methods that share a checkpoint grid (keyed by report label)."""
    frames = reports[0]["frames"]
    for r in reports[1:]:
        if r["frames"] != frames:
            raise SchemaMismatchError("sample efficiency needs a shared checkpoint grid")
    se = sample_efficiency(frames, {r["label"]: np.array(r["_curves"]) for r in reports})
    return {
        "p_star": se.p_star,
        "threshold": se.threshold,
        "frame": se.frame,
        "runs_reaching": {k: f"{se.runs_reaching[k]}/{se.runs_total[k]}" for k in se.frame},
        "seed_frames": se.seed_frames,
    }


CSV_FIELDS = ["method", "suite", "schedule", "metric", "median", "q25", "q75", "n"]


def report_rows(report: dict) -> List[dict]:
    rows = []
    for metric, s in report["summary"].items():
        rows.append({"method": report["buffer_mode"], "suite": report["suite"], "schedule": report["schedule"],
                     "metric": metric, **s})
    return rows


def write_report(reports: Sequence[dict], json_path, csv_path=None, extra: Optional[dict] = None) -> None:
    doc = {"reports": [{k: v for k, v in r.items() if not k.startswith("_")} for r in reports]}
    if extra:
        doc.update(extra)
    Path(json_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if csv_path is not None:
        Path(csv_path).write_text(report_csv(reports))


def report_csv(reports: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        for row in report_rows(r):
            w.writerow({k: ("" if row[k] is None else row[k]) for k in CSV_FIELDS})
    return buf.getvalue()


def load_runs(paths: Iterable) -> Dict[int, RunLog]:
    out = {}
    for p in paths:
        log = RunLog.load(p)
        out[int(log.header["seed"])] = log
    return out


def load_baselines(paths: Iterable) -> Dict[int, List[RunLog]]:
    out: Dict[int, List[RunLog]] = {}
    for p in paths:
        log = RunLog.load(p)
        ti = int(log.header["task_order"][0])
        out.setdefault(ti, []).append(log)
    for logs in out.values():
        logs.sort(key=lambda lg: lg.header["seed"])
    return out
