"""Augmented replay: spliced rollout chunks, a short-term FIFO buffer and a
long-term reservoir buffer that keeps a uniform random subset of every chunk
ever produced.

Chunks are stored as stacked numpy arrays (one row per step) so that window
sampling is a slice rather than a Python loop.
"""

from __future__ import annotations

import heapq
import json
from collections import Counter, deque
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import numpy as np


class ReplayError(Exception):
    pass


class BufferEmptyError(ReplayError):
    pass


class RejectedInputError(ReplayError, ValueError):
    pass


@dataclass
class Step:
    """One transition of the interaction stream.

    ``action`` is the action taken *at* this observation (0 on the final step
    of an episode, where no action follows). ``reward`` and ``cont`` describe
    the transition that produced this observation.
    """

    observation: np.ndarray
    action: int
    reward: float
    is_first: bool
    is_last: bool
    cont: float
    task: int = 0


@dataclass
class Chunk:
    observation: np.ndarray  # (L, d)
    action: np.ndarray  # (L,)
    reward: np.ndarray  # (L,)
    is_first: np.ndarray  # (L,) bool
    is_last: np.ndarray  # (L,) bool
    cont: np.ndarray  # (L,)
    chunk_id: int
    source_task: int

    def __len__(self) -> int:
        return len(self.action)

    @property
    def steps(self) -> List[Step]:
        return [
            Step(self.observation[i].copy(), int(self.action[i]), float(self.reward[i]),
                 bool(self.is_first[i]), bool(self.is_last[i]), float(self.cont[i]),
                 self.source_task)
            for i in range(len(self))
        ]

    @classmethod
    def from_steps(cls, steps: List[Step], chunk_id: int, source_task: int) -> "Chunk":
        return cls(
            observation=np.stack([s.observation for s in steps]).astype(np.float64),
            action=np.array([s.action for s in steps], dtype=np.int64),
            reward=np.array([s.reward for s in steps], dtype=np.float64),
            is_first=np.array([s.is_first for s in steps], dtype=bool),
            is_last=np.array([s.is_last for s in steps], dtype=bool),
            cont=np.array([s.cont for s in steps], dtype=np.float64),
            chunk_id=chunk_id,
            source_task=source_task,
        )


class Splicer:
    """Concatenates episodes into fixed-length chunks.

    Leftover steps of an episode are carried over and continue into the next
    episode; the ``is_first`` flag of each step is kept untouched so that
    episode boundaries inside a chunk stay visible.
    """

    def __init__(self, length: int):
        if length < 1:
            raise ValueError("chunk length must be positive")
        self.length = length
        self.pending: List[Step] = []
        self.env_step_counter = 0
        self.next_chunk_id = 0

    def push(self, step: Step) -> Optional[Chunk]:
        obs = np.asarray(step.observation, dtype=np.float64)
        if not np.all(np.isfinite(obs)) or not np.isfinite(step.reward):
            raise RejectedInputError(f"non-finite step at env step {self.env_step_counter}")
        self.pending.append(step)
        self.env_step_counter += 1
        if len(self.pending) < self.length:
            return None
        chunk = Chunk.from_steps(self.pending, self.next_chunk_id, self.pending[0].task)
        self.next_chunk_id += 1
        self.pending = []
        return chunk


class FifoBuffer:
    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.contents: deque = deque()

    def __len__(self) -> int:
        return len(self.contents)

    def __iter__(self) -> Iterator[Chunk]:
        return iter(self.contents)

    def __getitem__(self, i: int) -> Chunk:
        return self.contents[i]

    def insert(self, chunk: Chunk) -> Optional[Chunk]:
        """Append ``chunk``; returns the evicted oldest chunk, if any."""
        if self.capacity == 0:
            return chunk
        self.contents.append(chunk)
        if len(self.contents) > self.capacity:
            return self.contents.popleft()
        return None


class ReservoirBuffer:
    """Size-limited min-heap keyed by uniform random keys.

    Keeping the ``capacity`` largest of i.i.d. uniform keys retains a uniform
    random subset of all offered chunks. Heap entries are ``(key, chunk_id,
    chunk)`` so equal keys resolve in favour of the larger chunk id.
    """

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.entries: List[tuple] = []
        self.seen = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Chunk]:
        return (entry[2] for entry in self.entries)

    def __getitem__(self, i: int) -> Chunk:
        return self.entries[i][2]

    @property
    def keys(self) -> List[float]:
        return [entry[0] for entry in self.entries]

    def offer(self, chunk: Chunk, rng: np.random.Generator, key: Optional[float] = None) -> bool:
        """Offer a chunk; ``key`` overrides the random draw (test hook)."""
        if key is None:
            key = float(rng.random())
        self.seen += 1
        if self.capacity == 0:
            return False
        entry = (key, chunk.chunk_id, chunk)
        if len(self.entries) < self.capacity:
            heapq.heappush(self.entries, entry)
            return True
        if entry[:2] <= self.entries[0][:2]:
            return False
        heapq.heapreplace(self.entries, entry)
        return True


@dataclass
class SampleBatch:
    observation: np.ndarray  # (B, W, d)
    action: np.ndarray  # (B, W)
    reward: np.ndarray
    is_first: np.ndarray
    is_last: np.ndarray
    cont: np.ndarray
    source: int  # 1 = FIFO, 2 = reservoir
    chunk_ids: np.ndarray
    offsets: np.ndarray

    @property
    def shape(self):
        return self.action.shape


class AugmentedBuffer:
    """FIFO buffer plus reservoir buffer, sampled one buffer per minibatch."""

    def __init__(self, fifo_capacity: int, reservoir_capacity: int, length: int):
        self.d1 = FifoBuffer(fifo_capacity)
        self.d2 = ReservoirBuffer(reservoir_capacity)
        self.length = length

    def __len__(self) -> int:
        return len(self.d1) + len(self.d2)

    def add(self, chunk: Chunk, rng: np.random.Generator) -> None:
        if len(chunk) != self.length:
            raise RejectedInputError(f"chunk has {len(chunk)} steps, expected {self.length}")
        self.d1.insert(chunk)
        self.d2.offer(chunk, rng)

    def sample(self, rng: np.random.Generator, batch_size: int, window: int) -> SampleBatch:
        if window > self.length or window < 1:
            raise ValueError(f"window {window} must be in [1, {self.length}]")
        if len(self) == 0:
            raise BufferEmptyError("both replay buffers are empty")
        i = int(rng.integers(2)) + 1
        # fall back to the other buffer while one is still empty
        if i == 2 and len(self.d2) == 0:
            i = 1
        elif i == 1 and len(self.d1) == 0:
            i = 2
        buf = self.d1 if i == 1 else self.d2
        idx = rng.integers(len(buf), size=batch_size)
        offsets = rng.integers(0, self.length - window + 1, size=batch_size)
        chunks = [buf[int(j)] for j in idx]

        def gather(name):
            return np.stack([getattr(c, name)[o:o + window] for c, o in zip(chunks, offsets)])

        return SampleBatch(
            observation=gather("observation"),
            action=gather("action"),
            reward=gather("reward"),
            is_first=gather("is_first"),
            is_last=gather("is_last"),
            cont=gather("cont"),
            source=i,
            chunk_ids=np.array([c.chunk_id for c in chunks]),
            offsets=offsets,
        )

    def save(self, path, obs_dim: int, num_actions: int) -> None:
        save_snapshot(self, path, obs_dim, num_actions)


def capacity_observations(fifo_capacity: int, reservoir_capacity: int, length: int) -> int:
    return (fifo_capacity + reservoir_capacity) * length


def buffer_composition(buf) -> Dict[int, int]:
    """Chunk counts per source task for any iterable of chunks."""
    return dict(sorted(Counter(chunk.source_task for chunk in buf).items()))


_CHUNK_FIELDS = ("observation", "action", "reward", "is_first", "is_last", "cont")


def save_snapshot(aug: AugmentedBuffer, path, obs_dim: int, num_actions: int) -> None:
    """Write both buffers to a single ``.npz`` file with a JSON header."""
    path = Path(path)
    fifo = list(aug.d1)
    res = aug.d2.entries
    header = {
        "format": "arrowlab-buffer",
        "version": 1,
        "fifo_capacity": aug.d1.capacity,
        "reservoir_capacity": aug.d2.capacity,
        "length": aug.length,
        "obs_dim": obs_dim,
        "num_actions": num_actions,
        "reservoir_seen": aug.d2.seen,
        "n_fifo": len(fifo),
        "n_reservoir": len(res),
    }
    arrays = {"header": np.array(json.dumps(header, sort_keys=True))}
    for prefix, chunks in (("fifo", fifo), ("res", [e[2] for e in res])):
        for name in _CHUNK_FIELDS:
            if chunks:
                arrays[f"{prefix}_{name}"] = np.stack([getattr(c, name) for c in chunks])
        arrays[f"{prefix}_chunk_id"] = np.array([c.chunk_id for c in chunks], dtype=np.int64)
        arrays[f"{prefix}_source_task"] = np.array([c.source_task for c in chunks], dtype=np.int64)
    arrays["res_key"] = np.array([e[0] for e in res], dtype=np.float64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_snapshot(path) -> tuple:
    """Returns ``(buffer, header)``; heap order and keys are restored exactly."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        aug = AugmentedBuffer(header["fifo_capacity"], header["reservoir_capacity"], header["length"])

        def chunks(prefix, n):
            out = []
            for j in range(n):
                out.append(Chunk(
                    **{name: data[f"{prefix}_{name}"][j] for name in _CHUNK_FIELDS},
                    chunk_id=int(data[f"{prefix}_chunk_id"][j]),
                    source_task=int(data[f"{prefix}_source_task"][j]),
                ))
            return out

        aug.d1.contents.extend(chunks("fifo", header["n_fifo"]))
        keys = data["res_key"]
        aug.d2.entries = [(float(k), c.chunk_id, c) for k, c in zip(keys, chunks("res", header["n_reservoir"]))]
        aug.d2.seen = header["reservoir_seen"]
    return aug, header
