"""Soft actor-critic over a discrete action set with a pluggable actor.

The actor is either the diffusion sampler (D2SAC) or a plain softmax MLP (the
SAC ablation); everything else -- replay, twin critics, targets, losses, the
collect/update loop -- is shared.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .agod import ActorNetwork, build_vp_schedule, reverse_chain, select_action, softmax
from .baselines import MlpActor
from .env import AspEnv, InvalidField, TaskRequest
from .nn import Adam, ComputeGraph, DenseLayer, Tensor, build_mlp, copy_layers, forward, save_checkpoint

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "env_steps", "train_reward", "test_reward", "actor_loss", "critic_loss",
                  "entropy", "crashed_rate", "finished_rate", "wall_time_s")


@dataclass(frozen=True)
class TrainConfig:
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    alpha: float = 0.05
    tau: float = 0.005
    batch_size: int = 512
    weight_decay: float = 1e-4
    gamma: float = 0.95
    denoise_steps: int = 5
    buffer_size: int = 1_000_000
    train_steps: int = 1000
    collect_per_step: int = 1000
    updates_per_step: int = 1
    eval_every: int = 1
    eval_episodes: int = 1
    final_eval_episodes: int = 5
    beta_min: float = 0.1
    beta_max: float = 10.0
    noise_scale_mode: str = "quadratic"
    soft_target: bool = False
    reward_attribution: str = "assignment"
    hidden: int = 256
    t_dim: int = 16
    # wall-clock is the one nondeterministic metric; off gives byte-stable logs
    record_wall_time: bool = True

    def validate(self) -> None:
        for name in ("actor_lr", "critic_lr", "tau", "batch_size", "buffer_size", "train_steps",
                     "collect_per_step", "updates_per_step", "eval_every", "eval_episodes", "final_eval_episodes",
                     "denoise_steps", "hidden", "t_dim"):
            if getattr(self, name) <= 0:
                raise InvalidField(name, f"{name} must be positive")
        if self.alpha < 0 or self.weight_decay < 0:
            raise InvalidField("alpha" if self.alpha < 0 else "weight_decay", "alpha and weight_decay must be nonnegative")
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidField("gamma", f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise InvalidField("tau", f"tau must lie in (0, 1], got {self.tau}")
        if self.batch_size > self.buffer_size:
            raise InvalidField("batch_size", "batch_size cannot exceed buffer_size")
        if not 0 < self.beta_min < self.beta_max:
            raise InvalidField("beta_min", "need 0 < beta_min < beta_max")
        if self.noise_scale_mode not in ("quadratic", "ddpm"):
            raise InvalidField("noise_scale_mode", f"noise_scale_mode must be 'quadratic' or 'ddpm', got {self.noise_scale_mode!r}")
        if self.reward_attribution not in ("assignment", "completion"):
            raise InvalidField("reward_attribution", "reward_attribution must be 'assignment' or 'completion'")
        if self.t_dim % 2:
            raise InvalidField("t_dim", "t_dim must be even")


# -- replay -----------------------------------------------------------------


@dataclass
class Transition:
    s: np.ndarray
    a: int
    s_next: np.ndarray
    r: float
    d: bool


class ReplayBuffer:
    """FIFO ring of transitions; storage grows geometrically up to ``capacity``."""

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self._alloc(min(capacity, 1024))
        self.size = 0
        self.head = 0  # next write slot once full

    def _alloc(self, n: int) -> None:
        old = getattr(self, "s", None)
        s, s2 = np.zeros((n, self.obs_dim)), np.zeros((n, self.obs_dim))
        a, r, d = np.zeros(n, dtype=np.int64), np.zeros(n), np.zeros(n)
        if old is not None:
            k = self.size
            s[:k], s2[:k], a[:k], r[:k], d[:k] = self.s[:k], self.s2[:k], self.a[:k], self.r[:k], self.d[:k]
        self.s, self.s2, self.a, self.r, self.d = s, s2, a, r, d

    def __len__(self) -> int:
        return self.size

    def store(self, t: Transition) -> None:
        if self.size < self.capacity:
            if self.size == len(self.a):
                self._alloc(min(self.capacity, 2 * len(self.a)))
            i = self.size
            self.size += 1
        else:
            i = self.head
            self.head = (self.head + 1) % self.capacity
        self.s[i], self.s2[i], self.a[i], self.r[i], self.d[i] = t.s, t.s_next, t.a, t.r, float(t.d)

    def ordered(self) -> list[Transition]:
        """Contents oldest first."""
        idx = [(self.head + k) % self.size for k in range(self.size)] if self.size == self.capacity else range(self.size)
        return [Transition(self.s[i].copy(), int(self.a[i]), self.s2[i].copy(), float(self.r[i]), bool(self.d[i])) for i in idx]

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} transitions, batch needs {batch_size}")
        idx = rng.integers(0, self.size, size=batch_size)
        return {"s": self.s[idx], "a": self.a[idx], "s_next": self.s2[idx], "r": self.r[idx], "d": self.d[idx]}


# -- actors -----------------------------------------------------------------


class DiffusionPolicy:
    kind = "d2sac"

    def __init__(self, actor: ActorNetwork, schedule, noise_scale_mode: str = "quadratic"):
        self.net = actor
        self.schedule = schedule
        self.noise_scale_mode = noise_scale_mode

    @property
    def layers(self) -> list[DenseLayer]:
        return self.net.layers

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def clone(self) -> "DiffusionPolicy":
        return DiffusionPolicy(self.net.clone(), self.schedule, self.noise_scale_mode)

    def logits(self, graph: ComputeGraph, state: Tensor, rng: np.random.Generator, trace: bool = False):
        x0, steps = reverse_chain(graph, self.net, self.schedule, state, rng, self.noise_scale_mode, trace)
        return (x0, steps) if trace else x0


class SoftmaxPolicy:
    kind = "sac_mlp"

    def __init__(self, actor: MlpActor):
        self.net = actor

    @property
    def layers(self) -> list[DenseLayer]:
        return self.net.layers

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def clone(self) -> "SoftmaxPolicy":
        return SoftmaxPolicy(self.net.clone())

    def logits(self, graph: ComputeGraph, state: Tensor, rng=None, trace: bool = False):
        x = self.net.logits(graph, state)
        return (x, None) if trace else x


def policy_probs(policy, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64)
    squeeze = states.ndim == 1
    x = policy.logits(ComputeGraph(enabled=False), Tensor(states[None] if squeeze else states), rng)
    p = softmax(x.values)
    return p[0] if squeeze else p


def act(policy, obs: np.ndarray, rng: np.random.Generator, mode: str = "sample") -> int:
    return select_action(policy_probs(policy, obs, rng), mode, rng)


# -- critics ----------------------------------------------------------------


def make_critic(state_dim: int, num_actions: int, rng: np.random.Generator, hidden: int = 256) -> list[DenseLayer]:
    return build_mlp([state_dim, hidden, hidden, num_actions], ["mish", "mish", "none"], rng)


def critic_values(critic: list[DenseLayer], states: np.ndarray) -> np.ndarray:
    return forward(ComputeGraph(enabled=False), critic, Tensor(np.atleast_2d(states))).values


def q_values(states: np.ndarray, critics) -> np.ndarray:
    """Element-wise minimum of the two critics' Q vectors."""
    q1, q2 = (critic_values(c, states) for c in critics)
    q = np.minimum(q1, q2)
    return q[0] if np.ndim(states) == 1 else q


def _params(layers) -> list[Tensor]:
    return [p for layer in layers for p in layer.parameters()]


def soft_update(online, target, tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, parameter by parameter."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    for p, tp in zip(_params(online), _params(target)):
        if tau == 1.0:
            tp.values[...] = p.values
        else:
            tp.values *= 1.0 - tau
            tp.values += tau * p.values


class NonFiniteLossError(FloatingPointError):
    pass


# -- the agent --------------------------------------------------------------


@dataclass
class Streams:
    """Independent generators for each consumer of randomness."""

    actor_init: np.random.Generator
    critic_init: np.random.Generator
    replay: np.random.Generator
    diffusion: np.random.Generator
    action: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        from .config import derive_rng
        return cls(*(derive_rng(seed, name) for name in ("actor_init", "critic_init", "replay", "diffusion", "action")))


class Agent:
    def __init__(self, obs_dim: int, num_actions: int, config: TrainConfig, streams: Streams,
                 actor_kind: str = "d2sac"):
        config.validate()
        self.config = config
        self.obs_dim, self.num_actions = obs_dim, num_actions
        self.streams = streams
        if actor_kind == "d2sac":
            schedule = build_vp_schedule(config.denoise_steps, config.beta_min, config.beta_max)
            net = ActorNetwork(obs_dim, num_actions, streams.actor_init, config.hidden, config.t_dim)
            self.actor = DiffusionPolicy(net, schedule, config.noise_scale_mode)
        elif actor_kind == "sac_mlp":
            self.actor = SoftmaxPolicy(MlpActor(obs_dim, num_actions, streams.actor_init, config.hidden))
        else:
            raise ValueError(f"unknown actor kind {actor_kind!r}")
        self.actor_kind = actor_kind
        self.critics = [make_critic(obs_dim, num_actions, streams.critic_init, config.hidden) for _ in range(2)]
        self.target_actor = self.actor.clone()
        self.target_critics = [copy_layers(c) for c in self.critics]
        self.actor_opt = Adam(self.actor.parameters(), config.actor_lr, config.weight_decay)
        self.critic_opt = Adam(_params(self.critics[0]) + _params(self.critics[1]), config.critic_lr, config.weight_decay)
        self.buffer = ReplayBuffer(config.buffer_size, obs_dim)

    # acting
    def act(self, obs, mode: str = "sample", rng: np.random.Generator | None = None) -> int:
        return act(self.actor, obs, rng if rng is not None else self.streams.action, mode)

    # losses
    def td_target(self, batch) -> np.ndarray:
        c = self.config
        s2 = batch["s_next"]
        p_next = policy_probs(self.target_actor, s2, self.streams.diffusion)
        q_next = np.minimum(critic_values(self.target_critics[0], s2), critic_values(self.target_critics[1], s2))
        v_next = (p_next * q_next).sum(axis=1)
        if c.soft_target:
            safe = np.where(p_next > 0, p_next, 1.0)
            v_next = v_next - c.alpha * (p_next * np.log(safe)).sum(axis=1)
        return batch["r"] + c.gamma * (1.0 - batch["d"]) * v_next

    def critic_loss(self, graph: ComputeGraph, batch, y: np.ndarray) -> Tensor:
        target = Tensor(y)
        s = Tensor(batch["s"])
        terms = []
        for critic in self.critics:
            q = graph.gather(forward(graph, critic, s), batch["a"])
            terms.append(graph.square(graph.sub(target, q)))
        return graph.mean(graph.add(terms[0], terms[1]))

    def actor_loss(self, graph: ComputeGraph, states: np.ndarray, q: np.ndarray) -> tuple[Tensor, float]:
        x0 = self.actor.logits(graph, Tensor(states), self.streams.diffusion)
        p = graph.softmax(x0)
        logp = graph.log_softmax(x0)
        neg_entropy = graph.rowdot(p, logp)
        expected_q = graph.rowdot(p, Tensor(q))
        loss = graph.mean(graph.sub(graph.scale(neg_entropy, self.config.alpha), expected_q))
        return loss, float(-neg_entropy.values.mean())

    # updates
    def critic_update(self, batch) -> float:
        y = self.td_target(batch)
        graph = ComputeGraph()
        loss = self.critic_loss(graph, batch, y)
        if not np.isfinite(loss.item()):
            raise NonFiniteLossError("critic loss is not finite")
        grads = graph.backward(loss, self.critic_opt.params)
        self.critic_opt.step(grads)
        return loss.item()

    def actor_update(self, batch) -> tuple[float, float]:
        q = q_values(batch["s"], self.critics)
        graph = ComputeGraph()
        loss, ent = self.actor_loss(graph, batch["s"], q)
        if not np.isfinite(loss.item()):
            raise NonFiniteLossError("actor loss is not finite")
        grads = graph.backward(loss, self.actor_opt.params)
        self.actor_opt.step(grads)
        return loss.item(), ent

    def update_targets(self) -> None:
        tau = self.config.tau
        soft_update(self.actor.layers, self.target_actor.layers, tau)
        for online, target in zip(self.critics, self.target_critics):
            soft_update(online, target, tau)

    def update(self) -> dict[str, float]:
        batch = self.buffer.sample(self.config.batch_size, self.streams.replay)
        actor_loss, ent = self.actor_update(batch)
        critic_loss = self.critic_update(batch)
        self.update_targets()
        return {"actor_loss": actor_loss, "critic_loss": critic_loss, "entropy": ent}

    # persistence
    def save(self, directory, manifest: dict | None = None) -> None:
        os.makedirs(directory, exist_ok=True)
        save_checkpoint(os.path.join(directory, "actor.agod"), self.actor.layers)
        save_checkpoint(os.path.join(directory, "target_actor.agod"), self.target_actor.layers)
        for i in range(2):
            save_checkpoint(os.path.join(directory, f"critic{i + 1}.agod"), self.critics[i])
            save_checkpoint(os.path.join(directory, f"target_critic{i + 1}.agod"), self.target_critics[i])
        info = {"actor_kind": self.actor_kind, "train_config": asdict(self.config)}
        info.update(manifest or {})
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump(info, fh, indent=2, sort_keys=True)


# -- collection -------------------------------------------------------------


class Collector:
    """Steps a training env with the agent's sampling policy, auto-resetting at
    episode ends, and hands finished transitions to the replay buffer.

    With ``assignment`` attribution a transition is held back until the utility
    of the task it placed is known (completion, or end-of-episode drain), and
    that utility becomes its reward; with ``completion`` attribution the env's
    per-step reward is stored as is.
    """

    def __init__(self, env: AspEnv, agent: Agent, attribution: str):
        self.env = env
        self.agent = agent
        self.attribution = attribution
        self.obs = env.reset()
        self.pending: dict[int, list] = {}
        self.episode_returns: list[float] = []
        self.env_steps = 0

    def _store(self, s, a, s2, r, d) -> None:
        self.agent.buffer.store(Transition(s, a, s2, r, d))

    def step(self) -> None:
        env, agent = self.env, self.agent
        s = self.obs
        task_id = env.current_task.id
        a = agent.act(s)
        out = env.step(a)
        self.env_steps += 1
        if self.attribution == "completion":
            self._store(s, a, out.observation, out.reward, out.done)
        else:
            info = out.info
            if info.crashed:
                self._store(s, a, out.observation, -info.penalty, out.done)
            else:
                self.pending[task_id] = [s, a, out.observation, 0.0, out.done]
            credits = info.completion_credits
            if out.done:
                credits = credits + env.drain()
            for tid, credit in credits:
                rec = self.pending.pop(tid)
                rec[3] += credit
                self._store(*rec)
        if out.done:
            self.episode_returns.append(env.total_reward)
            self.obs = env.reset()
        else:
            self.obs = out.observation

    def collect(self, n: int) -> None:
        for _ in range(n):
            self.step()

    def last_return(self) -> float:
        if self.episode_returns:
            return self.episode_returns[-1]
        return self.env.total_reward


# -- evaluation -------------------------------------------------------------


EVAL_KEYS = ("reward", "finished_rate", "crashed_rate", "obtained_utility", "lost_utility")


def evaluate(choose: Callable[[np.ndarray, AspEnv], int], env: AspEnv,
             workloads: list[list[TaskRequest]]) -> dict[str, float]:
    """Run one episode per workload with ``choose(obs, env) -> action`` and
    average the episode metrics. A chooser with a ``reset`` method is reset at
    the start of every episode."""
    rows = []
    reset = getattr(choose, "reset", None)
    for wl in workloads:
        obs = env.reset(wl)
        if reset is not None:
            reset()
        done = False
        while not done:
            out = env.step(choose(obs, env))
            obs, done = out.observation, out.done
        rows.append(env.metrics())
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def greedy_chooser(policy, seed: int):
    """Greedy action under ``policy`` with noise reseeded per call so repeated
    evaluations of the same parameters agree exactly."""
    rng = np.random.default_rng(seed)

    def choose(obs, env):
        return act(policy, obs, rng, "greedy")

    return choose


@dataclass
class TrainResult:
    agent: Agent
    metrics: list[dict] = field(default_factory=list)
    final_eval: dict[str, float] = field(default_factory=dict)
    wall_time_s: float = 0.0


def train(config: TrainConfig, env: AspEnv, eval_env: AspEnv, eval_workloads: list[list[TaskRequest]],
          seed: int, actor_kind: str = "d2sac", final_workloads: list[list[TaskRequest]] | None = None,
          eval_seed: int = 0, checkpoint_dir=None,
          manifest: dict | None = None, on_step: Callable[[int, Agent], None] | None = None) -> TrainResult:
    """The collect/update loop: ``train_steps`` rounds of ``collect_per_step``
    transitions followed by one actor, critic and target update (once the buffer
    holds a batch). Returns one metrics row per round."""
    config.validate()
    agent = Agent(env.config.obs_dim, env.num_actions, config, Streams.from_seed(seed), actor_kind)
    collector = Collector(env, agent, config.reward_attribution)
    result = TrainResult(agent)
    t0 = time.perf_counter()
    nan = float("nan")
    for step in range(1, config.train_steps + 1):
        collector.collect(config.collect_per_step)
        losses = {"actor_loss": nan, "critic_loss": nan, "entropy": nan}
        if len(agent.buffer) >= config.batch_size:
            for _ in range(config.updates_per_step):
                losses = agent.update()
        row = {"step": step, "env_steps": collector.env_steps, "train_reward": collector.last_return(), **losses}
        if step % config.eval_every == 0 or step == config.train_steps:
            m = evaluate(greedy_chooser(agent.actor, eval_seed), eval_env, eval_workloads)
            row.update(test_reward=m["reward"], crashed_rate=m["crashed_rate"], finished_rate=m["finished_rate"])
        else:
            row.update(test_reward=nan, crashed_rate=nan, finished_rate=nan)
        row["wall_time_s"] = time.perf_counter() - t0 if config.record_wall_time else 0.0
        result.metrics.append({k: row[k] for k in METRIC_COLUMNS})
        if on_step is not None:
            on_step(step, agent)
        log.debug("step %d: %s", step, row)
    result.wall_time_s = time.perf_counter() - t0
    if final_workloads:
        result.final_eval = evaluate(greedy_chooser(agent.actor, eval_seed + 1), eval_env, final_workloads)
    if checkpoint_dir is not None:
        agent.save(checkpoint_dir, {"seed": seed, "step": config.train_steps, **(manifest or {})})
    return result


def sac_mlp_ablation(config: TrainConfig, env: AspEnv, eval_env: AspEnv,
                     eval_workloads: list[list[TaskRequest]], seed: int, **kwargs) -> TrainResult:
    """The same loop with the diffusion actor swapped for a softmax MLP."""
    return train(config, env, eval_env, eval_workloads, seed, actor_kind="sac_mlp", **kwargs)
