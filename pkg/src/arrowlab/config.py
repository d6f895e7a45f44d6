"""Experiment configuration shared by the training loop, the harness and the CLI."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

from .envs import SCHEDULES
from .replay import capacity_observations

SCHEMA_VERSION = 1
BUFFER_MODES = ("augmented", "fifo_only")
SCALING_MODES = ("buffer", "actor", "none")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    suite: str = "disjoint"
    schedule: str = "default"
    buffer_mode: str = "augmented"
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    suite_seed: int = 0
    steps_per_task: int = 10_000
    eval_interval: int = 1_000
    eval_episodes: int = 64
    frames_per_epoch: int = 150
    frame_multiplier: int = 1
    # environment
    obs_dim: int = 256
    grid_size: int = 6
    horizon: int = 64
    delta_shared: float = 1.5
    delta_disjoint: float = 1.0
    theme_overlap: float = 0.4
    # replay
    chunk_length: int = 64
    fifo_capacity: int = 64
    reservoir_capacity: int = 64
    batch_size: int = 8
    window: int = 16
    # world model
    model_lr: float = 1.5
    # agent
    imagine_horizon: int = 8
    imagine_starts: int = 64
    gamma: float = 0.9
    entropy_coef: float = 3e-3
    actor_lr: float = 8.0
    critic_lr: float = 1.0
    actor_decay: float = 0.003
    train_every: int = 16
    reward_scaling: str = "buffer"
    reward_scales: Optional[List[float]] = None
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "ExperimentConfig":
        if self.suite not in ("shared", "disjoint"):
            raise ConfigError(f"unknown suite {self.suite!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.buffer_mode not in BUFFER_MODES:
            raise ConfigError(f"unknown buffer_mode {self.buffer_mode!r}")
        if self.reward_scaling not in SCALING_MODES:
            raise ConfigError(f"unknown reward_scaling {self.reward_scaling!r}")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.steps_per_task <= 0 or self.eval_interval <= 0:
            raise ConfigError("steps_per_task and eval_interval must be positive")
        if self.steps_per_task % self.eval_interval:
            raise ConfigError("eval_interval must divide steps_per_task")
        if self.schedule == "two_cycle" and self.steps_per_task % 2:
            raise ConfigError("two_cycle requires an even steps_per_task")
        if self.train_every < 1:
            raise ConfigError("train_every must be >= 1")
        if not 1 <= self.window <= self.chunk_length:
            raise ConfigError("window must be in [1, chunk_length]")
        if self.window < 2:
            raise ConfigError("window must be >= 2 for world-model training pairs")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if not 0.0 <= self.actor_decay < 1.0:
            raise ConfigError("actor_decay must lie in [0, 1)")
        if self.entropy_coef < 0:
            raise ConfigError("entropy_coef must be >= 0")
        if not 0.0 <= self.theme_overlap < 1.0:
            raise ConfigError("theme_overlap must lie in [0, 1)")
        if self.reward_scales is not None and any(s <= 0 for s in self.reward_scales):
            raise ConfigError("reward scales must be positive")
        return self

    def capacities(self) -> Tuple[int, int]:
        """(C1, C2) actually used; fifo_only folds the reservoir into the FIFO."""
        if self.buffer_mode == "fifo_only":
            return self.fifo_capacity + self.reservoir_capacity, 0
        return self.fifo_capacity, self.reservoir_capacity

    @property
    def capacity_observations(self) -> int:
        c1, c2 = self.capacities()
        return capacity_observations(c1, c2, self.chunk_length)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        data = self.to_dict()
        data.update(changes)
        return ExperimentConfig(**data)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "arrowlab experiment config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "suite": {"enum": ["shared", "disjoint"]},
        "schedule": {"enum": list(SCHEDULES)},
        "buffer_mode": {"enum": list(BUFFER_MODES)},
        "reward_scaling": {"enum": list(SCALING_MODES)},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "reward_scales": {"type": ["array", "null"], "items": {"type": "number", "exclusiveMinimum": 0}},
        **{name: {"type": "integer", "minimum": 0} for name in (
            "suite_seed", "steps_per_task", "eval_interval", "eval_episodes", "frames_per_epoch",
            "frame_multiplier", "obs_dim", "grid_size", "horizon", "chunk_length", "fifo_capacity",
            "reservoir_capacity", "batch_size", "window", "imagine_horizon", "imagine_starts",
            "train_every")},
        **{name: {"type": "number"} for name in (
            "delta_shared", "delta_disjoint", "theme_overlap", "model_lr", "gamma", "entropy_coef", "actor_lr",
            "critic_lr", "actor_decay")},
    },
}
