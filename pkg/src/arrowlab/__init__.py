"""Continual model-based RL laboratory built around an augmented replay buffer
(short-term FIFO plus a long-term reservoir of spliced rollout chunks)."""

from .config import ConfigError, ExperimentConfig
from .replay import AugmentedBuffer, Chunk, FifoBuffer, ReservoirBuffer, Splicer, Step
from .envs import Curriculum, GridWorld, TaskSpec, make_suite
from .worldmodel import LinearWorldModel
from .agent import LinearAgent, RunLog, arrow_train

__version__ = "0.1.0"

__all__ = [
    "AugmentedBuffer", "Chunk", "ConfigError", "Curriculum", "ExperimentConfig", "FifoBuffer",
    "GridWorld", "LinearAgent", "LinearWorldModel", "ReservoirBuffer", "RunLog", "Splicer", "Step",
    "TaskSpec", "arrow_train", "make_suite",
]
