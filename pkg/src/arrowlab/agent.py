"""Linear-softmax actor with a linear critic, trained on imagined rollouts,
and the outer continual training loop (model, actor, act, append; repeat).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np

from .config import ExperimentConfig
from .envs import NUM_ACTIONS, Curriculum, GridEnv, TaskSpec, batch_returns
from .replay import AugmentedBuffer, Splicer, buffer_composition, capacity_observations
from .worldmodel import LinearWorldModel, gram_max_eig, imagine, train_model, ImaginedTrajectories


class UnknownTaskError(KeyError):
    pass


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class LinearAgent:
    def __init__(self, obs_dim: int, num_actions: int = NUM_ACTIONS, entropy_coef: float = 3e-3,
                 gamma: float = 0.95, actor_lr: float = 1.0, critic_lr: float = 0.5,
                 actor_decay: float = 0.0):
        self.obs_dim = obs_dim
        self.num_actions = num_actions
        self.entropy_coef = entropy_coef
        self.gamma = gamma
        self.actor_lr = actor_lr
        self.critic_lr = critic_lr
        self.actor_decay = actor_decay
        self.theta = np.zeros((num_actions, obs_dim))
        self.u = np.zeros(obs_dim)

    def probs(self, phi: np.ndarray) -> np.ndarray:
        return softmax(np.asarray(phi) @ self.theta.T)

    def value(self, phi: np.ndarray) -> np.ndarray:
        return np.asarray(phi) @ self.u

    def act(self, phi: np.ndarray, rng: np.random.Generator) -> int:
        p = self.probs(phi)
        a = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
        return min(a, self.num_actions - 1)


def save_agent(agent: LinearAgent, path, config_hash: str = "") -> None:
    with open(path, "wb") as fh:
        np.savez(fh, theta=agent.theta, u=agent.u, entropy_coef=agent.entropy_coef, gamma=agent.gamma,
                 actor_lr=agent.actor_lr, critic_lr=agent.critic_lr, config_hash=np.array(config_hash))


def load_agent(path):
    """Returns (agent, config_hash)."""
    with np.load(path) as z:
        theta = z["theta"]
        agent = LinearAgent(theta.shape[1], theta.shape[0], float(z["entropy_coef"]), float(z["gamma"]),
                            float(z["actor_lr"]), float(z["critic_lr"]))
        agent.theta, agent.u = theta.copy(), z["u"].copy()
        return agent, str(z["config_hash"])


def entropy(probs: np.ndarray) -> np.ndarray:
    return -np.sum(probs * np.log(np.clip(probs, 1e-300, None)), axis=-1)


@dataclass
class ActorTargets:
    """Flattened imagined states with their fixed (non-differentiated) targets."""

    features: np.ndarray  # (m, d)
    actions: np.ndarray  # (m,)
    returns: np.ndarray  # (m,)
    weights: np.ndarray  # (m,)


def imagined_returns(traj: ImaginedTrajectories, u: np.ndarray, gamma: float,
                     reward_scale: float = 1.0) -> ActorTargets:
    """Bootstrapped returns R_t = r_t + gamma * c_t * R_{t+1}, R_H = V(phi_H).

    Weights are the predicted probability that the imagined episode is still
    running when step t is taken.
    """
    n, H = traj.actions.shape
    R = traj.features[:, H] @ u
    returns = np.empty((n, H))
    for t in range(H - 1, -1, -1):
        R = reward_scale * traj.rewards[:, t] + gamma * traj.conts[:, t] * R
        returns[:, t] = R
    alive = np.ones((n, H))
    if H > 1:
        alive[:, 1:] = np.cumprod(traj.conts[:, :-1], axis=1)
    return ActorTargets(
        traj.features[:, :H].reshape(n * H, -1),
        traj.actions.reshape(-1),
        returns.reshape(-1),
        alive.reshape(-1),
    )


def policy_surrogate(theta: np.ndarray, features, actions, advantages, weights, entropy_coef) -> float:
    """mean_i w_i * (A_i log pi(a_i | phi_i) + eta * H(pi(. | phi_i)))."""
    logits = features @ theta.T
    logp = logits - logits.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1)
    chosen = logp[np.arange(len(actions)), actions]
    return float(np.mean(weights * (advantages * chosen + entropy_coef * ent)))


def policy_gradient(theta: np.ndarray, features, actions, advantages, weights, entropy_coef) -> np.ndarray:
    logits = features @ theta.T
    p = softmax(logits)
    logp = np.log(np.clip(p, 1e-300, None))
    ent = -(p * logp).sum(axis=1, keepdims=True)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(actions)), actions] = 1.0
    dlogits = advantages[:, None] * (onehot - p) - entropy_coef * p * (logp + ent)
    dlogits *= weights[:, None] / len(actions)
    return dlogits.T @ features


def critic_loss(u: np.ndarray, features, returns, weights) -> float:
    return float(np.mean(0.5 * weights * (features @ u - returns) ** 2))


def critic_gradient(u: np.ndarray, features, returns, weights) -> np.ndarray:
    return (weights * (features @ u - returns)) @ features / len(returns)


def actor_critic_update(agent: LinearAgent, traj: ImaginedTrajectories,
                        reward_scale: float = 1.0) -> Dict[str, float]:
    if len(traj) == 0:
        raise ValueError("no trajectories")
    if traj.horizon == 0:
        return {"critic_loss": 0.0, "entropy": float("nan"), "mean_return": float("nan")}
    tg = imagined_returns(traj, agent.u, agent.gamma, reward_scale)
    adv = tg.returns - tg.features @ agent.u
    closs = critic_loss(agent.u, tg.features, tg.returns, tg.weights)
    g_actor = policy_gradient(agent.theta, tg.features, tg.actions, adv, tg.weights, agent.entropy_coef)
    g_critic = critic_gradient(agent.u, tg.features, tg.returns, tg.weights)
    # same Gram-normalised step as the world model
    lam = gram_max_eig(tg.features * np.sqrt(tg.weights)[:, None])
    step = len(tg.returns) / max(lam, 1.0)
    agent.theta *= 1.0 - agent.actor_decay
    agent.theta += agent.actor_lr * step * g_actor
    agent.u -= agent.critic_lr * step * g_critic
    return {
        "critic_loss": closs,
        "entropy": float(np.mean(entropy(agent.probs(tg.features)))),
        "mean_return": float(np.mean(tg.returns)),
    }


class RewardScaler:
    def __init__(self, scales: Mapping[int, float]):
        for k, s in scales.items():
            if not (np.isfinite(s) and s > 0):
                raise ValueError(f"scale for task {k} must be positive and finite")
        self.scales = dict(scales)

    def scale(self, task_index: int, r: float) -> float:
        try:
            return self.scales[task_index] * r
        except KeyError:
            raise UnknownTaskError(f"no reward scale for task {task_index}") from None

    @classmethod
    def for_curriculum(cls, cur: Curriculum, overrides: Optional[List[float]] = None) -> "RewardScaler":
        if overrides is not None:
            return cls({t.task_index: float(s) for t, s in zip(cur.tasks, overrides)})
        return cls({t.task_index: t.reward_scale for t in cur.tasks})


def scale_reward(scaler: RewardScaler, task_index: int, r: float) -> float:
    return scaler.scale(task_index, r)


@dataclass
class RunLog:
    header: dict = field(default_factory=dict)
    records: List[dict] = field(default_factory=list)

    def eval_records(self) -> List[dict]:
        return [r for r in self.records if r["kind"] == "eval"]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "header", **self.header}, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "RunLog":
        log = cls()
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                kind = rec.get("kind", "eval")
                if kind == "header":
                    rec.pop("kind")
                    log.header = rec
                else:
                    rec["kind"] = kind
                    log.records.append(rec)
        return log


def evaluate(agent: LinearAgent, tasks: List[TaskSpec], episodes: int, rng: np.random.Generator):
    out = []
    for task in tasks:
        r = batch_returns(task, agent.probs, rng, episodes)
        out.append((task, float(r.mean()), float(r.std())))
    return out


@dataclass
class TrainState:
    """Everything a run owns; returned so callers can inspect or checkpoint it."""

    model: LinearWorldModel
    agent: LinearAgent
    buffer: AugmentedBuffer
    splicer: Splicer
    iterations: List[int] = field(default_factory=list)


def arrow_train(curriculum: Curriculum, config: ExperimentConfig, rng: np.random.Generator,
                seed: int = 0, eval_rng: Optional[np.random.Generator] = None,
                trace: Optional[list] = None, state_out: Optional[dict] = None,
                state_in: Optional[dict] = None) -> RunLog:
    """Run the continual training loop over ``curriculum.exposures()``.

    Every iteration: train the world model on one sampled minibatch, imagine
    from the batch states and update the actor-critic, then act
    ``train_every`` steps in the real task and push them into the buffer.
    ``trace`` (if given) receives the per-iteration phase names.
    ``state_in`` resumes from a previous run's ``state_out`` (model, agent,
    buffer, splicer); frames still count from zero.
    """
    config.validate()
    d = curriculum.tasks[0].obs_dim
    eval_rng = eval_rng if eval_rng is not None else np.random.default_rng([seed, 7919])
    c1, c2 = config.capacities()
    L = config.chunk_length
    model = LinearWorldModel(d, NUM_ACTIONS, config.model_lr)
    agent = LinearAgent(d, NUM_ACTIONS, config.entropy_coef, config.gamma, config.actor_lr, config.critic_lr,
                        config.actor_decay)
    buffer = AugmentedBuffer(c1, c2, L)
    splicer = Splicer(L)
    if state_in is not None:
        model, agent, buffer, splicer = (state_in[k] for k in ("model", "agent", "buffer", "splicer"))
    scaler = RewardScaler.for_curriculum(curriculum, config.reward_scales)
    order = curriculum.order
    boundaries = set(curriculum.boundaries)

    log = RunLog(header={
        "seed": seed,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "suite": curriculum.suite,
        "suite_seed": curriculum.seed,
        "schedule": curriculum.schedule,
        "steps_per_task": curriculum.steps_per_task,
        "task_order": [t.task_index for t in order],
        "task_names": [t.name for t in order],
        "boundaries": curriculum.boundaries,
        "total_frames": curriculum.total_frames,
        "capacity_observations": capacity_observations(c1, c2, L),
        "fifo_capacity": c1,
        "reservoir_capacity": c2,
    })
    stats = {"next": [], "reward": [], "cont": [], "critic_loss": [], "entropy": []}

    def checkpoint(frame: int):
        for task, mean, std in evaluate(agent, order, config.eval_episodes, eval_rng):
            log.records.append({
                "kind": "eval",
                "frame": frame * config.frame_multiplier,
                "epoch": frame // config.frames_per_epoch,
                "task": task.name,
                "task_index": task.task_index,
                "mean_return": mean,
                "std_return": std,
                "episodes": config.eval_episodes,
                "seed": seed,
            })
        if frame > 0:
            log.records.append({
                "kind": "train",
                "frame": frame * config.frame_multiplier,
                **{k: (float(np.nanmean(v)) if v else None) for k, v in stats.items()},
                "fifo_composition": {str(k): v for k, v in buffer_composition(buffer.d1).items()},
                "reservoir_composition": {str(k): v for k, v in buffer_composition(buffer.d2).items()},
                "reservoir_seen": buffer.d2.seen,
            })
            for v in stats.values():
                v.clear()

    def push(step):
        chunk = splicer.push(step)
        if chunk is not None:
            buffer.add(chunk, rng)

    frame = 0
    checkpoint(0)
    for task, frames in curriculum.exposures():
        env = GridEnv(task)
        cur = env.reset(rng)
        scale = 1.0
        if config.reward_scaling != "none":
            scale = scaler.scale(task.task_index, 1.0)
        end = frame + frames
        while frame < end:
            if len(buffer):
                batch = buffer.sample(rng, config.batch_size, config.window)
                ls = train_model(model, batch)
                if trace is not None:
                    trace.append("model")
                for k in ("next", "reward", "cont"):
                    stats[k].append(ls[k])
                starts = batch.observation[batch.cont > 0.5]
                if len(starts) > config.imagine_starts:
                    starts = starts[rng.choice(len(starts), config.imagine_starts, replace=False)]
                if len(starts):
                    traj = imagine(model, agent.probs, starts, config.imagine_horizon, rng)
                    actor_scale = scale if config.reward_scaling == "actor" else 1.0
                    ac = actor_critic_update(agent, traj, actor_scale)
                    stats["critic_loss"].append(ac["critic_loss"])
                    stats["entropy"].append(ac["entropy"])
                    if trace is not None:
                        trace.append("actor")
            # the last iteration of an exposure may be short
            for _ in range(min(config.train_every, end - frame)):
                a = agent.act(cur.observation, rng)
                cur.action = a
                push(cur)
                nxt = env.step(a, rng)
                if config.reward_scaling == "buffer":
                    nxt.reward = scale * nxt.reward
                frame += 1
                if nxt.is_last:
                    push(nxt)
                    cur = env.reset(rng)
                else:
                    cur = nxt
                if frame % config.eval_interval == 0 or frame in boundaries:
                    checkpoint(frame)
            if trace is not None:
                trace.append("act")
    if state_out is not None:
        state_out.update(model=model, agent=agent, buffer=buffer, splicer=splicer)
    return log
