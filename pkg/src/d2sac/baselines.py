"""Heuristic schedulers and the plain-MLP actor used for the SAC ablation.

Every policy exposes ``act(obs, rng) -> int`` and ``reset()``; per-policy state
(the round-robin cursor, the prophet's view of the simulator) lives on the
object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import AspEnv, utility
from .nn import ComputeGraph, DenseLayer, Tensor, build_mlp, copy_layers, forward


class RandomPolicy:
    name = "random"

    def __init__(self, num_actions: int):
        self.num_actions = num_actions

    def reset(self) -> None:
        pass

    def act(self, obs, rng: np.random.Generator) -> int:
        return int(rng.integers(self.num_actions))


@dataclass
class HeuristicState:
    num_actions: int
    cursor: int = 0

    def to_dict(self) -> dict:
        return {"num_actions": self.num_actions, "cursor": self.cursor}

    @classmethod
    def from_dict(cls, d: dict) -> "HeuristicState":
        state = cls(int(d["num_actions"]), int(d["cursor"]))
        if not 0 <= state.cursor < state.num_actions:
            raise ValueError("cursor out of range")
        return state


def round_robin_policy(state: HeuristicState) -> int:
    a = state.cursor
    state.cursor = (state.cursor + 1) % state.num_actions
    return a


class RoundRobinPolicy:
    name = "round_robin"

    def __init__(self, num_actions: int):
        self.state = HeuristicState(num_actions)

    def reset(self) -> None:
        self.state.cursor = 0

    def act(self, obs, rng=None) -> int:
        return round_robin_policy(self.state)


def crash_avoid_policy(obs) -> int:
    """ASP with the most free resources; lowest index on ties.

    Availability sits at every other slot after the two task features, and the
    normalization is the same increasing map for all ASPs, so the argmax of the
    normalized values is the argmax of the raw ones.
    """
    return int(np.argmax(np.asarray(obs)[3::2]))


class CrashAvoidPolicy:
    name = "crash_avoid"

    def reset(self) -> None:
        pass

    def act(self, obs, rng=None) -> int:
        return crash_avoid_policy(obs)


def prophet_policy(task_steps: int, fleet, available) -> int:
    """Best-utility ASP among those the task fits on; max availability if none fit."""
    available = np.asarray(available)
    best, best_u = -1, -np.inf
    for i, asp in enumerate(fleet):
        if task_steps <= available[i]:
            u = utility(asp, task_steps)
            if u > best_u:
                best, best_u = i, u
    if best < 0:
        return int(np.argmax(available))
    return best


class ProphetPolicy:
    """Evaluation-only: reads true utilities and occupancy from the simulator."""

    name = "prophet"

    def __init__(self, env: AspEnv):
        self.env = env

    def reset(self) -> None:
        pass

    def act(self, obs=None, rng=None) -> int:
        return prophet_policy(self.env.current_task.steps, self.env.fleet, self.env.available())


class MlpActor:
    """state -> 256 Mish -> 256 Mish -> I linear; softmax gives the policy."""

    def __init__(self, state_dim: int, num_actions: int, rng: np.random.Generator, hidden: int = 256):
        self.state_dim = state_dim
        self.num_actions = num_actions
        self.layers = build_mlp([state_dim, hidden, hidden, num_actions], ["mish", "mish", "none"], rng)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def clone(self) -> "MlpActor":
        other = object.__new__(MlpActor)
        other.state_dim, other.num_actions = self.state_dim, self.num_actions
        other.layers = copy_layers(self.layers)
        return other

    @classmethod
    def from_layers(cls, layers: list[DenseLayer]) -> "MlpActor":
        other = object.__new__(cls)
        other.layers = list(layers)
        other.state_dim, other.num_actions = layers[0].in_dim, layers[-1].out_dim
        return other

    def logits(self, graph: ComputeGraph, state: Tensor) -> Tensor:
        return forward(graph, self.layers, state)


HEURISTICS = ("random", "round_robin", "crash_avoid", "prophet")
POLICY_NAMES = HEURISTICS + ("sac_mlp", "d2sac")


def make_heuristic(name: str, env: AspEnv):
    if name == "random":
        return RandomPolicy(env.num_actions)
    if name == "round_robin":
        return RoundRobinPolicy(env.num_actions)
    if name == "crash_avoid":
        return CrashAvoidPolicy()
    if name == "prophet":
        return ProphetPolicy(env)
    raise KeyError(f"unknown heuristic {name!r}; expected one of {HEURISTICS}")


def run_episode(policy, env: AspEnv, rng: np.random.Generator, workload=None) -> dict[str, float]:
    obs = env.reset(workload)
    policy.reset()
    done = False
    while not done:
        out = env.step(policy.act(obs, rng))
        obs, done = out.observation, out.done
    return env.metrics()
