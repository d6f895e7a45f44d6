"""Linear world model: per-action next-feature map, reward head and
continuation head, trained by SGD on replayed windows and rolled forward to
produce imagined trajectories for the actor.

This is a deliberate stand-in for a recurrent latent model. All gradients are
closed form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from .envs import NUM_ACTIONS, TaskSpec, GridEnv
from .replay import SampleBatch


def sigmoid(x):
    # clipped so the output stays strictly inside (0, 1) in float64
    return 0.5 * (1.0 + np.tanh(0.5 * np.clip(x, -30.0, 30.0)))


@dataclass
class Transitions:
    obs: np.ndarray  # (n, d)
    action: np.ndarray  # (n,)
    next_obs: np.ndarray  # (n, d)
    reward: np.ndarray  # (n,)
    cont: np.ndarray  # (n,)

    def __len__(self):
        return len(self.action)


def batch_transitions(batch: SampleBatch) -> Transitions:
    """Consecutive pairs inside each window, skipping pairs whose successor
    starts a new episode."""
    keep = ~batch.is_first[:, 1:]
    return Transitions(
        obs=batch.observation[:, :-1][keep],
        action=batch.action[:, :-1][keep],
        next_obs=batch.observation[:, 1:][keep],
        reward=batch.reward[:, 1:][keep],
        cont=batch.cont[:, 1:][keep],
    )


class LinearWorldModel:
    def __init__(self, obs_dim: int, num_actions: int = NUM_ACTIONS, learning_rate: float = 0.05):
        self.obs_dim = obs_dim
        self.num_actions = num_actions
        self.learning_rate = learning_rate
        self.W = np.zeros((num_actions, obs_dim, obs_dim))
        self.v = np.zeros((num_actions, obs_dim))
        self.c = np.zeros((num_actions, obs_dim))

    def predict(self, phi: np.ndarray, a: int):
        return self.W[a] @ phi, float(self.v[a] @ phi), float(sigmoid(self.c[a] @ phi))

    def predict_batch(self, phi: np.ndarray, actions: np.ndarray):
        """Vectorised ``predict`` over rows of ``phi`` with per-row actions."""
        n = phi.shape[0]
        nxt = np.empty_like(phi)
        rew = np.empty(n)
        logit = np.empty(n)
        for a in range(self.num_actions):
            idx = np.flatnonzero(actions == a)
            if idx.size:
                p = phi[idx]
                nxt[idx] = p @ self.W[a].T
                rew[idx] = p @ self.v[a]
                logit[idx] = p @ self.c[a]
        return nxt, rew, sigmoid(logit)

    def params(self) -> Dict[str, np.ndarray]:
        return {"W": self.W, "v": self.v, "c": self.c}

    def copy(self) -> "LinearWorldModel":
        out = LinearWorldModel(self.obs_dim, self.num_actions, self.learning_rate)
        out.W, out.v, out.c = self.W.copy(), self.v.copy(), self.c.copy()
        return out


def _head_terms(model: LinearWorldModel, tr: Transitions, a: int):
    m = tr.action == a
    p = tr.obs[m]
    err = p @ model.W[a].T - tr.next_obs[m]
    rerr = p @ model.v[a] - tr.reward[m]
    z = p @ model.c[a]
    return p, err, rerr, z, tr.cont[m]


def model_loss(model: LinearWorldModel, tr: Transitions) -> Dict[str, float]:
    """Per-action mean losses, summed over actions.

    next: 0.5 * ||W[a] phi - phi'||^2, reward: 0.5 * (v[a].phi - r)^2,
    cont: logistic log-loss of sigmoid(c[a].phi) against cont.
    """
    out = {"next": 0.0, "reward": 0.0, "cont": 0.0}
    for a in range(model.num_actions):
        p, err, rerr, z, y = _head_terms(model, tr, a)
        if p.shape[0] == 0:
            continue
        out["next"] += 0.5 * float(np.mean(np.sum(err**2, axis=1)))
        out["reward"] += 0.5 * float(np.mean(rerr**2))
        # log(1 + e^z) - y z, stable form
        out["cont"] += float(np.mean(np.logaddexp(0.0, z) - y * z))
    return out


def gram_max_eig(x: np.ndarray, iters: int = 12) -> float:
    """Largest eigenvalue of x.T @ x by power iteration from a fixed start."""
    if x.shape[0] == 0:
        return 0.0
    if x.shape[0] <= 32:
        return float(np.linalg.eigvalsh(x @ x.T)[-1])
    v = np.ones(x.shape[1]) / np.sqrt(x.shape[1])
    lam = 0.0
    for _ in range(iters):
        w = x.T @ (x @ v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    # power iteration underestimates; pad so steps stay on the safe side
    return 1.1 * lam


def model_gradients(model: LinearWorldModel, tr: Transitions):
    """Gradients of ``model_loss`` (per-action means)."""
    gW = np.zeros_like(model.W)
    gv = np.zeros_like(model.v)
    gc = np.zeros_like(model.c)
    for a in range(model.num_actions):
        p, err, rerr, z, y = _head_terms(model, tr, a)
        n = p.shape[0]
        if n == 0:
            continue
        gW[a] = err.T @ p / n
        gv[a] = rerr @ p / n
        gc[a] = (sigmoid(z) - y) @ p / n
    return gW, gv, gc


def train_model(model: LinearWorldModel, batch) -> Dict[str, float]:
    """One SGD step per action head on all valid pairs of ``batch`` (a
    SampleBatch or Transitions); returns the pre-update losses.

    Each head's step is ``learning_rate * n_a / lambda_max`` times its mean
    gradient, where lambda_max is the top eigenvalue of the pairs' feature Gram
    matrix. For unit features visited once this is a plain per-pair update;
    repeated states shrink the step so that ``learning_rate < 2`` is stable.
    """
    tr = batch if isinstance(batch, Transitions) else batch_transitions(batch)
    losses = {"next": 0.0, "reward": 0.0, "cont": 0.0}
    if len(tr) == 0:
        return {"next": float("nan"), "reward": float("nan"), "cont": float("nan"), "pairs": 0}
    for a in range(model.num_actions):
        p, err, rerr, z, y = _head_terms(model, tr, a)
        n = p.shape[0]
        if n == 0:
            continue
        losses["next"] += 0.5 * float(np.einsum("ij,ij->", err, err)) / n
        losses["reward"] += 0.5 * float(rerr @ rerr) / n
        losses["cont"] += float(np.mean(np.logaddexp(0.0, z) - y * z))
        lam = gram_max_eig(p)
        if lam <= 0.0:
            continue
        # step * mean gradient == (lr / max(lam, 1)) * summed gradient
        step = model.learning_rate / max(lam, 1.0)
        model.W[a] -= step * (err.T @ p)
        model.v[a] -= step * (rerr @ p)
        model.c[a] -= step * ((sigmoid(z) - y) @ p)
    losses["pairs"] = len(tr)
    return losses


@dataclass
class ImaginedTrajectories:
    features: np.ndarray  # (n, H+1, d); the last entry is the bootstrap state
    actions: np.ndarray  # (n, H)
    rewards: np.ndarray  # (n, H)
    conts: np.ndarray  # (n, H)

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    def __len__(self):
        return self.actions.shape[0]


def imagine(model: LinearWorldModel, policy_probs: Callable[[np.ndarray], np.ndarray],
            start_features: np.ndarray, horizon: int, rng: np.random.Generator) -> ImaginedTrajectories:
    start = np.atleast_2d(np.asarray(start_features, dtype=np.float64))
    n, d = start.shape
    feats = np.empty((n, horizon + 1, d))
    actions = np.empty((n, horizon), dtype=np.int64)
    rewards = np.empty((n, horizon))
    conts = np.empty((n, horizon))
    feats[:, 0] = start
    for t in range(horizon):
        probs = policy_probs(feats[:, t])
        u = rng.random(n)
        a = np.minimum((probs.cumsum(axis=1) < u[:, None]).sum(axis=1), model.num_actions - 1)
        nxt, rew, cont = model.predict_batch(feats[:, t], a)
        actions[:, t] = a
        rewards[:, t] = rew
        conts[:, t] = cont
        feats[:, t + 1] = nxt
    return ImaginedTrajectories(feats, actions, rewards, conts)


def probe_transitions(task: TaskSpec, probe_count: int, rng: np.random.Generator) -> Transitions:
    """Transitions of the true environment under a uniform random policy,
    with rewards already multiplied by the task's reward scale."""
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    env = GridEnv(task)
    prev = env.reset(rng)
    obs, act, nxt, rew, cont = [], [], [], [], []
    while len(act) < probe_count:
        a = int(rng.integers(NUM_ACTIONS))
        step = env.step(a, rng)
        obs.append(prev.observation)
        act.append(a)
        nxt.append(step.observation)
        rew.append(step.reward * task.reward_scale)
        cont.append(step.cont)
        prev = env.reset(rng) if step.is_last else step
    return Transitions(np.array(obs), np.array(act), np.array(nxt), np.array(rew), np.array(cont))


def model_eval_error(model: LinearWorldModel, task: TaskSpec, probe_count: int,
                     rng: np.random.Generator) -> float:
    """Mean squared one-step next-feature error plus squared reward error."""
    tr = probe_transitions(task, probe_count, rng)
    nxt, rew, _ = model.predict_batch(tr.obs, tr.action)
    return float(np.mean(np.sum((nxt - tr.next_obs) ** 2, axis=1) + (rew - tr.reward) ** 2))


def save_model(model: LinearWorldModel, path, config_hash: str = "") -> None:
    """npz container with W, v, c, dimensions and the producing config hash."""
    with open(path, "wb") as fh:
        np.savez(fh, W=model.W, v=model.v, c=model.c, obs_dim=model.obs_dim,
                 num_actions=model.num_actions, learning_rate=model.learning_rate,
                 config_hash=np.array(config_hash))


def load_model(path):
    """Returns (model, config_hash)."""
    with np.load(path) as z:
        model = LinearWorldModel(int(z["obs_dim"]), int(z["num_actions"]), float(z["learning_rate"]))
        model.W, model.v, model.c = z["W"].copy(), z["v"].copy(), z["c"].copy()
        return model, str(z["config_hash"])
