"""Continual-learning metrics over checkpointed evaluation logs.

All quantities work on normalised scores ``q[i, n]`` (task ``i`` in
presentation order, checkpoint ``n``) where 0 is the random-policy level and
1 the end-of-training single-task level. Metrics that cannot be formed (flat
baseline, zero denominator, one-task min-ACC, Max-F on a one-cycle log) come
back as ``None`` rather than inf/nan.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

EPS = 1e-9
SE_THRESHOLD = 0.85


class MetricsError(Exception):
    pass


class DegenerateBaselineError(MetricsError):
    def __init__(self, task: str, detail: str = ""):
        self.task = task
        super().__init__(f"degenerate baseline for task {task!r}{': ' + detail if detail else ''}")


class MissingCheckpointError(MetricsError):
    pass


@dataclass
class EvalLog:
    """Per-task mean returns ``p[i, n]`` of one continual run."""

    frames: np.ndarray  # (n,)
    returns: np.ndarray  # (T, n)
    steps_per_task: int
    schedule: str = "default"
    task_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        self.returns = np.asarray(self.returns, dtype=np.float64)
        if self.frames.size and np.any(np.diff(self.frames) <= 0):
            raise MetricsError("checkpoint frames must be strictly increasing")
        if not self.task_names:
            self.task_names = [f"task{i}" for i in range(self.returns.shape[0])]

    @property
    def num_tasks(self) -> int:
        return self.returns.shape[0]

    @classmethod
    def from_records(cls, records: Iterable[dict], task_order: Sequence[int], steps_per_task: int,
                     schedule: str = "default") -> "EvalLog":
        """Build from JSONL eval records (one per checkpoint per task)."""
        table: Dict[int, Dict[int, float]] = {}
        names: Dict[int, str] = {}
        for r in records:
            if r.get("kind", "eval") != "eval":
                continue
            table.setdefault(int(r["task_index"]), {})[int(r["frame"])] = float(r["mean_return"])
            names[int(r["task_index"])] = r.get("task", str(r["task_index"]))
        missing = [t for t in task_order if t not in table]
        if missing:
            raise MissingCheckpointError(f"no evaluation records for tasks {missing}")
        frames = sorted(set().union(*(table[t].keys() for t in task_order)))
        p = np.empty((len(task_order), len(frames)))
        for i, t in enumerate(task_order):
            for j, f in enumerate(frames):
                if f not in table[t]:
                    raise MissingCheckpointError(f"task {names[t]!r} lacks a checkpoint at frame {f}")
                p[i, j] = table[t][f]
        return cls(np.array(frames), p, steps_per_task, schedule, [names[t] for t in task_order])


@dataclass
class BaselineSet:
    """Single-task curves ``p_ST[i, m]`` on frames covering [0, N]."""

    frames: np.ndarray
    returns: np.ndarray  # (T, m)
    task_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        self.returns = np.asarray(self.returns, dtype=np.float64)
        if not self.task_names:
            self.task_names = [f"task{i}" for i in range(self.returns.shape[0])]

    def random_level(self) -> np.ndarray:
        return self.returns[:, _index_of(self.frames, 0)]

    def final_level(self, steps_per_task: int) -> np.ndarray:
        return self.returns[:, _index_of(self.frames, steps_per_task)]


@dataclass
class NormalizedMatrix:
    frames: np.ndarray
    q: np.ndarray  # (T, n)
    steps_per_task: int
    task_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        self.q = np.asarray(self.q, dtype=np.float64)
        if not self.task_names:
            self.task_names = [f"task{i}" for i in range(self.q.shape[0])]

    @property
    def num_tasks(self) -> int:
        return self.q.shape[0]

    def at(self, i: int, frame: int) -> float:
        return float(self.q[i, _index_of(self.frames, frame)])

    def window(self, i: int, lo: int, hi: int) -> np.ndarray:
        """Scores of task ``i`` at checkpoints in the half-open window (lo, hi]."""
        m = (self.frames > lo) & (self.frames <= hi)
        return self.q[i, m]

    def before(self, i: int, frame: int) -> float:
        """Score at the last checkpoint strictly before ``frame``."""
        idx = np.flatnonzero(self.frames < frame)
        if idx.size == 0:
            raise MissingCheckpointError(f"no checkpoint before frame {frame}")
        return float(self.q[i, idx[-1]])


def _index_of(frames: np.ndarray, frame: int) -> int:
    idx = np.flatnonzero(frames == frame)
    if idx.size == 0:
        raise MissingCheckpointError(f"missing checkpoint at frame {frame}")
    return int(idx[0])


def normalize(log: EvalLog, base: BaselineSet, steps_per_task: Optional[int] = None) -> NormalizedMatrix:
    """q = (p - p_ST(0)) / (p_ST(N) - p_ST(0))."""
    N = log.steps_per_task if steps_per_task is None else steps_per_task
    if base.returns.shape[0] != log.num_tasks:
        raise MetricsError("baseline and log disagree on the number of tasks")
    lo = base.random_level()
    hi = base.final_level(N)
    denom = hi - lo
    for i, dv in enumerate(denom):
        if not abs(dv) > EPS:
            raise DegenerateBaselineError(log.task_names[i], f"p_ST(N) - p_ST(0) = {dv:.3g}")
    q = (log.returns - lo[:, None]) / denom[:, None]
    return NormalizedMatrix(log.frames.copy(), q, log.steps_per_task, list(log.task_names))


def normalize_baseline(base: BaselineSet, steps_per_task: int) -> NormalizedMatrix:
    log = EvalLog(base.frames, base.returns, steps_per_task, "single", list(base.task_names))
    return normalize(log, base, steps_per_task)


def forgetting(nm: NormalizedMatrix, exposure: Optional[int] = None, offset: int = 0) -> float:
    """F = 1/T sum_i [q_i(i N) - q_i(T N)].

    ``exposure`` and ``offset`` restrict the sum to one pass of a two-cycle
    schedule (per-exposure budget, start frame of the pass).
    """
    N = nm.steps_per_task if exposure is None else exposure
    T = nm.num_tasks
    end = offset + T * N
    return float(np.mean([nm.at(i, offset + (i + 1) * N) - nm.at(i, end) for i in range(T)]))


@dataclass
class ForwardTransfer:
    ft: Optional[float]
    per_task: List[Optional[float]]
    s_cl: List[float]
    s_st: List[float]


def forward_transfer(nm: NormalizedMatrix, nm_st: NormalizedMatrix) -> ForwardTransfer:
    """FT = 1/T sum_i (S_i - S_ST_i) / S_ST_i with S the mean score over the
    task's own training window. Tasks with S_ST = 0 are dropped with a warning."""
    N = nm.steps_per_task
    T = nm.num_tasks
    s_cl, s_st, per = [], [], []
    for i in range(T):
        w = nm.window(i, i * N, (i + 1) * N)
        ws = nm_st.window(i, 0, N)
        if w.size == 0 or ws.size == 0:
            raise MissingCheckpointError(f"no checkpoints inside the window of task {i}")
        s_cl.append(float(w.mean()))
        s_st.append(float(ws.mean()))
        if abs(s_st[-1]) > EPS:
            per.append((s_cl[-1] - s_st[-1]) / s_st[-1])
        else:
            warnings.warn(f"forward transfer undefined for task {nm.task_names[i]!r} (S_ST = 0)")
            per.append(None)
    defined = [v for v in per if v is not None]
    ft = float(np.mean(defined)) if defined else None
    return ForwardTransfer(ft, per, s_cl, s_st)


def acc(nm: NormalizedMatrix, k: int) -> float:
    """Mean score of tasks 1..k at the end of task k (k is 1-based)."""
    N = nm.steps_per_task
    if not 1 <= k <= nm.num_tasks:
        raise ValueError(f"k={k} outside 1..{nm.num_tasks}")
    return float(np.mean([nm.at(i, k * N) for i in range(k)]))


def min_acc(nm: NormalizedMatrix, k: int, until: Optional[int] = None) -> Optional[float]:
    """Mean over tasks i < k of the minimum score in (t_i, t_k]; ``until``
    replaces t_k for a running (mid-task) version."""
    N = nm.steps_per_task
    if k < 2:
        return None
    hi = k * N if until is None else until
    mins = []
    for i in range(k - 1):
        w = nm.window(i, (i + 1) * N, hi)
        if w.size == 0:
            raise MissingCheckpointError(f"no checkpoints after t_{i + 1}")
        mins.append(float(w.min()))
    return float(np.mean(mins))


def active_task(frame: int, steps_per_task: int, num_tasks: int) -> int:
    """1-based index k of the task being trained at ``frame`` (frame 0 -> 1)."""
    k = max(1, -(-frame // steps_per_task))
    return min(k, num_tasks)


def wc_acc(nm: NormalizedMatrix, frame: int) -> float:
    """(1/k) q_k(n) + (1 - 1/k) min-ACC_k, with minima taken up to n."""
    k = active_task(frame, nm.steps_per_task, nm.num_tasks)
    current = nm.at(k - 1, frame)
    if k == 1:
        return current
    return current / k + (1 - 1 / k) * min_acc(nm, k, until=frame)


def wc_acc_curve(nm: NormalizedMatrix) -> List[float]:
    return [wc_acc(nm, int(f)) for f in nm.frames]


@dataclass
class TwoCycle:
    max_f: List[float]
    recovery: List[Optional[float]]
    t1: List[int]
    t2: List[int]
    t3: List[int]

    @property
    def mean_max_f(self) -> float:
        return float(np.mean(self.max_f))

    @property
    def mean_recovery(self) -> Optional[float]:
        vals = [r for r in self.recovery if r is not None]
        return float(np.mean(vals)) if vals else None


def two_cycle_metrics(nm: NormalizedMatrix) -> TwoCycle:
    """Max-F_i = q_i(t1) - q_i(t2^-), Rec_i = q_i(t3) / q_i(t1).

    ``nm.steps_per_task`` is the full per-task budget N; each exposure gets N/2.
    """
    if nm.steps_per_task % 2:
        raise MetricsError("two-cycle metrics need an even per-task budget")
    half = nm.steps_per_task // 2
    T = nm.num_tasks
    out = TwoCycle([], [], [], [], [])
    for i in range(1, T + 1):
        t1, t2, t3 = i * half, T * half + (i - 1) * half, T * half + i * half
        q1 = nm.at(i - 1, t1)
        out.t1.append(t1)
        out.t2.append(t2)
        out.t3.append(t3)
        out.max_f.append(q1 - nm.before(i - 1, t2))
        out.recovery.append(nm.at(i - 1, t3) / q1 if abs(q1) > EPS else None)
    return out


def aggregate_curve(nm: NormalizedMatrix) -> np.ndarray:
    """Unweighted mean of all task scores at each checkpoint."""
    return nm.q.mean(axis=0)


@dataclass
class SampleEfficiency:
    p_star: float
    threshold: float
    frame: Dict[str, Optional[int]]  # SE_m from the median curve, None = never reached
    runs_reaching: Dict[str, int]
    runs_total: Dict[str, int]
    seed_frames: Dict[str, List[Optional[int]]]


def sample_efficiency(frames: Sequence[int], curves: Mapping[str, np.ndarray],
                      fraction: float = SE_THRESHOLD) -> SampleEfficiency:
    """``curves[m]`` is (seeds, checkpoints) of aggregate scores for method m."""
    frames = np.asarray(frames)
    medians = {m: np.median(np.atleast_2d(c), axis=0) for m, c in curves.items()}
    p_star = float(max(v.max() for v in medians.values()))
    thr = fraction * p_star

    def first(curve) -> Optional[int]:
        hit = np.flatnonzero(curve >= thr)
        return int(frames[hit[0]]) if hit.size else None

    seed_frames = {m: [first(row) for row in np.atleast_2d(c)] for m, c in curves.items()}
    return SampleEfficiency(
        p_star=p_star,
        threshold=thr,
        frame={m: first(v) for m, v in medians.items()},
        runs_reaching={m: sum(f is not None for f in fs) for m, fs in seed_frames.items()},
        runs_total={m: len(fs) for m, fs in seed_frames.items()},
        seed_frames=seed_frames,
    )


def summarize(values: Iterable[Optional[float]]) -> Dict[str, Optional[float]]:
    """Median with 0.25 / 0.75 quantiles, ignoring undefined entries."""
    vals = np.array([v for v in values if v is not None], dtype=float)
    if vals.size == 0:
        return {"median": None, "q25": None, "q75": None, "n": 0}
    q25, med, q75 = np.percentile(vals, [25, 50, 75])
    return {"median": float(med), "q25": float(q25), "q75": float(q75), "n": int(vals.size)}


def run_metrics(nm: NormalizedMatrix, nm_st: Optional[NormalizedMatrix], schedule: str) -> Dict[str, object]:
    """All scalar metrics of one run; absent ones are None."""
    T = nm.num_tasks
    out: Dict[str, object] = {k: None for k in (
        "forgetting", "forward_transfer", "acc", "min_acc", "wc_acc", "c1_forgetting",
        "c2_forgetting", "max_f", "recovery")}
    if schedule == "two_cycle":
        half = nm.steps_per_task // 2
        tc = two_cycle_metrics(nm)
        out["max_f"] = tc.mean_max_f
        out["recovery"] = tc.mean_recovery
        out["max_f_per_task"] = tc.max_f
        out["recovery_per_task"] = tc.recovery
        out["c1_forgetting"] = forgetting(nm, half, 0)
        out["c2_forgetting"] = forgetting(nm, half, T * half)
        return out
    out["forgetting"] = forgetting(nm)
    if nm_st is not None:
        ft = forward_transfer(nm, nm_st)
        out["forward_transfer"] = ft.ft
        out["forward_transfer_per_task"] = ft.per_task
    out["acc"] = acc(nm, T)
    out["min_acc"] = min_acc(nm, T)
    out["wc_acc"] = wc_acc(nm, T * nm.steps_per_task)
    out["acc_per_k"] = [acc(nm, k) for k in range(1, T + 1)]
    out["min_acc_per_k"] = [min_acc(nm, k) for k in range(1, T + 1)]
    return out
