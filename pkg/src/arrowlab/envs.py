"""Synthetic continual-learning task suites built from small gridworlds.

Each task renders its cell index through a "theme": a ``d x S`` matrix whose
unit-norm columns are the observations. The shared suite keeps one grid and
nudges the theme through cumulative variants; the disjoint suite draws six
unrelated grids and themes with wildly different raw reward magnitudes.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .replay import Step

UP, DOWN, LEFT, RIGHT, STAY = range(5)
NUM_ACTIONS = 5
_MOVES = {UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0), STAY: (0, 0)}

SCHEDULES = ("default", "reversed", "two_cycle")
SHARED_VARIANTS = ("base", "NB", "RT", "GA", "MA", "CA")
SHARED_NAMES = ("gridrun", "+NB", "+NB+RT", "+NB+RT+GA", "+NB+RT+GA+MA", "+NB+RT+GA+MA+CA")
DISJOINT_NAMES = ("maze-a", "maze-b", "maze-c", "maze-d", "maze-e", "maze-f")
DISJOINT_REWARD_SCALES = (0.05, 1.0, 0.001, 0.2, 0.5, 0.5)

DEFAULT_OBS_DIM = 256
DELTA_SHARED = 1.5
DELTA_DISJOINT = 1.0
THEME_OVERLAP = 0.4


class ActionError(ValueError):
    pass


@dataclass(frozen=True)
class GridWorld:
    width: int
    height: int
    walls: FrozenSet[int]
    start: int
    goal: int
    goal_reward: float = 1.0
    step_penalty: float = -0.01
    horizon: int = 64

    def __post_init__(self):
        if self.start == self.goal:
            raise ValueError("start and goal must differ")
        if self.start in self.walls or self.goal in self.walls:
            raise ValueError("start/goal on a wall")
        if self.step_penalty > 0:
            raise ValueError("step_penalty must be <= 0")
        if shortest_path_length(self) is None:
            raise ValueError("goal unreachable from start")

    @property
    def num_cells(self) -> int:
        return self.width * self.height

    def cell(self, x: int, y: int) -> int:
        return y * self.width + x

    def coords(self, s: int) -> Tuple[int, int]:
        return s % self.width, s // self.width

    def move(self, s: int, a: int) -> int:
        x, y = self.coords(s)
        dx, dy = _MOVES[a]
        nx, ny = x + dx, y + dy
        if not (0 <= nx < self.width and 0 <= ny < self.height):
            return s
        ns = self.cell(nx, ny)
        return s if ns in self.walls else ns

    def transition_table(self) -> np.ndarray:
        return np.array([[self.move(s, a) for a in range(NUM_ACTIONS)] for s in range(self.num_cells)])


def shortest_path_length(grid: GridWorld) -> Optional[int]:
    dist = {grid.start: 0}
    queue = deque([grid.start])
    while queue:
        s = queue.popleft()
        if s == grid.goal:
            return dist[s]
        for a in range(NUM_ACTIONS):
            ns = grid.move(s, a)
            if ns not in dist:
                dist[ns] = dist[s] + 1
                queue.append(ns)
    return None


def optimal_return(grid: GridWorld) -> float:
    """Finite-horizon value iteration (undiscounted) from the start cell."""
    table = grid.transition_table()
    values = np.zeros(grid.num_cells)
    for _ in range(grid.horizon):
        nxt = table  # (S, A)
        reward = np.where(nxt == grid.goal, grid.goal_reward, grid.step_penalty)
        future = np.where(nxt == grid.goal, 0.0, values[nxt])
        values = (reward + future).max(axis=1)
    return float(values[grid.start])


@dataclass
class Theme:
    projection: np.ndarray  # (d, S), unit-norm columns
    variant_id: str = "base"
    seed: int = 0

    def __call__(self, s: int) -> np.ndarray:
        return self.projection[:, s]


@dataclass
class TaskSpec:
    grid: GridWorld
    theme: Theme
    reward_scale: float
    name: str
    task_index: int

    def __post_init__(self):
        if not (np.isfinite(self.reward_scale) and self.reward_scale > 0):
            raise ValueError(f"reward_scale must be finite and positive, got {self.reward_scale}")

    @property
    def obs_dim(self) -> int:
        return self.theme.projection.shape[0]


@dataclass
class Curriculum:
    tasks: List[TaskSpec]
    steps_per_task: int
    schedule: str = "default"
    suite: str = ""
    seed: int = 0

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("curriculum needs at least one task")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "two_cycle" and self.steps_per_task % 2:
            raise ValueError("two_cycle requires an even steps_per_task")

    @property
    def order(self) -> List[TaskSpec]:
        """Tasks in presentation order (tau_1, ..., tau_T)."""
        return list(reversed(self.tasks)) if self.schedule == "reversed" else list(self.tasks)

    def exposures(self) -> List[Tuple[TaskSpec, int]]:
        order = self.order
        if self.schedule == "two_cycle":
            half = self.steps_per_task // 2
            return [(t, half) for t in order] * 2
        return [(t, self.steps_per_task) for t in order]

    @property
    def total_frames(self) -> int:
        return sum(n for _, n in self.exposures())

    @property
    def boundaries(self) -> List[int]:
        out, frame = [], 0
        for _, n in self.exposures():
            frame += n
            out.append(frame)
        return out

    def active_task(self, frame: int) -> TaskSpec:
        """Task being trained during the step that starts at ``frame``."""
        start = 0
        for task, n in self.exposures():
            if frame < start + n:
                return task
            start += n
        raise ValueError(f"frame {frame} beyond the curriculum ({self.total_frames})")

    def with_schedule(self, schedule: str) -> "Curriculum":
        return Curriculum(self.tasks, self.steps_per_task, schedule, self.suite, self.seed)


class GridEnv:
    """Stateful episode runner for one task; the rng argument is unused
    because transitions are deterministic."""

    def __init__(self, task: TaskSpec):
        self.task = task
        self.grid = task.grid
        self.pos = task.grid.start
        self.t = 0
        self.done = True

    def _obs(self) -> np.ndarray:
        return self.task.theme.projection[:, self.pos].copy()

    def reset(self, rng: Optional[np.random.Generator] = None) -> Step:
        self.pos = self.grid.start
        self.t = 0
        self.done = False
        return Step(self._obs(), 0, 0.0, True, False, 1.0, self.task.task_index)

    def step(self, action: int, rng: Optional[np.random.Generator] = None) -> Step:
        if not 0 <= action < NUM_ACTIONS:
            raise ActionError(f"action {action} out of range [0, {NUM_ACTIONS})")
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        self.pos = self.grid.move(self.pos, action)
        self.t += 1
        at_goal = self.pos == self.grid.goal
        reward = self.grid.goal_reward if at_goal else self.grid.step_penalty
        is_last = at_goal or self.t >= self.grid.horizon
        self.done = is_last
        return Step(self._obs(), 0, float(reward), False, is_last, 0.0 if at_goal else 1.0,
                    self.task.task_index)


def reset(task: TaskSpec, rng=None) -> Tuple[GridEnv, Step]:
    env = GridEnv(task)
    return env, env.reset(rng)


def batch_returns(task: TaskSpec, probs_fn: Callable[[np.ndarray], np.ndarray],
                  rng: np.random.Generator, episodes: int) -> np.ndarray:
    """Runs ``episodes`` episodes in lockstep; returns raw episodic returns."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    grid = task.grid
    table = grid.transition_table()
    proj = task.theme.projection
    pos = np.full(episodes, grid.start)
    alive = np.ones(episodes, dtype=bool)
    returns = np.zeros(episodes)
    for _ in range(grid.horizon):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        probs = probs_fn(proj[:, pos[idx]].T)
        u = rng.random(idx.size)
        actions = (probs.cumsum(axis=1) < u[:, None]).sum(axis=1)
        actions = np.minimum(actions, NUM_ACTIONS - 1)
        pos[idx] = table[pos[idx], actions]
        at_goal = pos[idx] == grid.goal
        returns[idx] += np.where(at_goal, grid.goal_reward, grid.step_penalty)
        alive[idx[at_goal]] = False
    return returns


def rollout_return(task: TaskSpec, probs_fn, rng: np.random.Generator, episodes: int) -> Tuple[float, float]:
    r = batch_returns(task, probs_fn, rng, episodes)
    return float(r.mean()), float(r.std())


def uniform_policy(features: np.ndarray) -> np.ndarray:
    return np.full((features.shape[0], NUM_ACTIONS), 1.0 / NUM_ACTIONS)


# ---------------------------------------------------------------------------
# suite construction


def normalize_columns(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=0, keepdims=True)


def random_theme(rng: np.random.Generator, d: int, num_cells: int, seed: int = 0) -> Theme:
    return Theme(normalize_columns(rng.standard_normal((d, num_cells))), "base", seed)


def theme_distance(a: Theme, b: Theme) -> float:
    """RMS column distance, i.e. Frobenius distance divided by sqrt(S)."""
    diff = a.projection - b.projection
    return float(np.linalg.norm(diff) / np.sqrt(diff.shape[1]))


def random_grid(rng: np.random.Generator, width: int = 6, height: int = 6, wall_frac: float = 0.15,
                horizon: int = 64, goal_reward: float = 1.0, step_penalty: float = -0.01,
                min_distance: int = 6, max_distance: int = 8) -> GridWorld:
    """Random walls and start/goal with a shortest path in [min_distance, max_distance].

    The upper bound keeps the goal discoverable by a uniform random walker
    within one episode, which the learner relies on for exploration.
    """
    n = width * height
    while True:
        walls = frozenset(int(c) for c in rng.choice(n, size=int(wall_frac * n), replace=False))
        free = [c for c in range(n) if c not in walls]
        start, goal = (int(c) for c in rng.choice(free, size=2, replace=False))
        try:
            grid = GridWorld(width, height, walls, start, goal, goal_reward, step_penalty, horizon)
        except ValueError:
            continue
        if min_distance <= shortest_path_length(grid) <= max_distance:
            return grid


def _agent_relative(grid: GridWorld) -> np.ndarray:
    # cell s shows the column of its offset from the goal (wrapped), a bijection
    perm = np.empty(grid.num_cells, dtype=int)
    gx, gy = grid.coords(grid.goal)
    for s in range(grid.num_cells):
        x, y = grid.coords(s)
        perm[s] = grid.cell((gx - x) % grid.width, (gy - y) % grid.height)
    return perm


def _variant_target(variant: str, proj: np.ndarray, grid: GridWorld, rng: np.random.Generator) -> np.ndarray:
    d, S = proj.shape
    if variant == "NB":  # drop "background" dimensions
        out = proj.copy()
        out[: d // 4] = 0.0
        return out
    if variant == "RT":  # restrict to a random half-dimensional basis
        basis, _ = np.linalg.qr(rng.standard_normal((d, d // 2)))
        return basis @ (basis.T @ proj)
    if variant == "GA":  # regenerate a block of "asset" rows
        out = proj.copy()
        rows = rng.choice(d, size=d // 4, replace=False)
        out[rows] = rng.standard_normal((rows.size, S)) / np.sqrt(d)
        return out
    if variant == "MA":  # half the rows collapse to their dominant rank-1 structure
        out = proj.copy()
        rows = rng.choice(d, size=d // 2, replace=False)
        u, s, vt = np.linalg.svd(proj[rows], full_matrices=False)
        out[rows] = s[0] * np.outer(u[:, 0], vt[0])
        return out
    if variant == "CA":
        return proj[:, _agent_relative(grid)]
    raise ValueError(f"unknown variant {variant!r}")


def _nudge(proj: np.ndarray, target: np.ndarray, base: np.ndarray, dist: float) -> np.ndarray:
    """Blend ``proj`` towards ``target`` until its RMS column distance to
    ``base`` reaches ``dist`` (or the full target, if that is closer)."""
    S = base.shape[1]

    def blend(lam):
        mix = proj + lam * (target - proj)
        norms = np.linalg.norm(mix, axis=0, keepdims=True)
        return mix / np.where(norms > 1e-12, norms, 1.0)

    def gap(m):
        return np.linalg.norm(m - base) / np.sqrt(S)

    full = blend(1.0)
    if gap(full) <= dist:
        return full
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if gap(blend(mid)) > dist:
            hi = mid
        else:
            lo = mid
    return blend(lo)


def make_shared_suite(seed: int, obs_dim: int = DEFAULT_OBS_DIM, steps_per_task: int = 10_000,
                      delta_shared: float = DELTA_SHARED, schedule: str = "default",
                      width: int = 6, height: int = 6, horizon: int = 64) -> Curriculum:
    rng = np.random.default_rng([seed, 1])
    grid = random_grid(rng, width, height, horizon=horizon)
    base = random_theme(rng, obs_dim, grid.num_cells, seed)
    # delta is an RMS column distance (as in theme_distance); variant k sits
    # at k/5 of it from the base so the perturbations accumulate evenly
    themes = [base]
    for k, variant in enumerate(SHARED_VARIANTS[1:], start=1):
        prev = themes[-1].projection
        target = _variant_target(variant, prev, grid, rng)
        dist = delta_shared * k / (len(SHARED_VARIANTS) - 1)
        themes.append(Theme(_nudge(prev, target, base.projection, dist), variant, seed))
    tasks = [TaskSpec(grid, th, 1.0, name, i) for i, (th, name) in enumerate(zip(themes, SHARED_NAMES))]
    return Curriculum(tasks, steps_per_task, schedule, "shared", seed)


def make_disjoint_suite(seed: int, obs_dim: int = DEFAULT_OBS_DIM, steps_per_task: int = 10_000,
                        delta_disjoint: float = DELTA_DISJOINT, schedule: str = "default",
                        width: int = 6, height: int = 6, horizon: int = 64,
                        reward_scales: Sequence[float] = DISJOINT_REWARD_SCALES,
                        theme_overlap: float = THEME_OVERLAP) -> Curriculum:
    """Six independently drawn grids. Each theme mixes a fresh random matrix
    with a common background matrix (weight ``theme_overlap`` on squared
    norm), so the same cell index looks alike across tasks while meaning
    something different; that overlap is what a linear learner can forget
    through."""
    if not 0.0 <= theme_overlap < 1.0:
        raise ValueError("theme_overlap must lie in [0, 1)")
    rng = np.random.default_rng([seed, 2])
    background = rng.standard_normal((obs_dim, width * height))
    tasks: List[TaskSpec] = []
    layouts = set()
    for i, (name, scale) in enumerate(zip(DISJOINT_NAMES, reward_scales)):
        while True:
            # raw magnitudes are the inverse of the scale so scaled rewards match
            grid = random_grid(rng, width, height, horizon=horizon,
                               goal_reward=1.0 / scale, step_penalty=-0.01 / scale)
            key = (grid.walls, grid.start, grid.goal)
            if key in layouts:
                continue
            fresh = rng.standard_normal((obs_dim, grid.num_cells))
            proj = normalize_columns(np.sqrt(theme_overlap) * background + np.sqrt(1 - theme_overlap) * fresh)
            theme = Theme(proj, "base", seed)
            if all(theme_distance(theme, t.theme) >= delta_disjoint for t in tasks):
                break
        layouts.add(key)
        tasks.append(TaskSpec(grid, theme, float(scale), name, i))
    return Curriculum(tasks, steps_per_task, schedule, "disjoint", seed)


def make_suite(name: str, seed: int, **kwargs) -> Curriculum:
    if name == "shared":
        return make_shared_suite(seed, **kwargs)
    if name == "disjoint":
        return make_disjoint_suite(seed, **kwargs)
    raise ValueError(f"unknown suite {name!r}")


def describe_suite(cur: Curriculum, obs_dim: int) -> dict:
    """JSON-ready description; ``make_suite(suite, seed, obs_dim=...)`` rebuilds it."""
    return {
        "suite": cur.suite,
        "seed": cur.seed,
        "obs_dim": obs_dim,
        "steps_per_task": cur.steps_per_task,
        "schedule": cur.schedule,
        "tasks": [
            {
                "task_index": t.task_index,
                "name": t.name,
                "variant": t.theme.variant_id,
                "reward_scale": t.reward_scale,
                "theme_seed": t.theme.seed,
                "width": t.grid.width,
                "height": t.grid.height,
                "walls": sorted(t.grid.walls),
                "start": t.grid.start,
                "goal": t.grid.goal,
                "goal_reward": t.grid.goal_reward,
                "step_penalty": t.grid.step_penalty,
                "horizon": t.grid.horizon,
                "optimal_return": optimal_return(t.grid),
            }
            for t in cur.order
        ],
    }
