"""Diffusion-based discrete action sampler.

A state-conditioned denoiser turns Gaussian noise into a logit vector over the
action set in ``T`` reverse steps; the softmax of the final vector is the
policy. Every step is recorded on a :class:`~d2sac.nn.ComputeGraph`, so losses
on the action probabilities backpropagate through the whole chain.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .nn import ComputeGraph, DenseLayer, Tensor, build_mlp, copy_layers, forward, sinusoidal_pos_emb

NOISE_SCALE_MODES = ("quadratic", "ddpm")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step VP tables. Arrays have length ``T + 1``; index 0 is the clean end
    (alpha_bar[0] = 1, beta[0] = tilde_beta[0] = 0) and steps are 1..T."""

    T: int
    beta_min: float
    beta_max: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    tilde_beta: np.ndarray


def build_vp_schedule(T: int, beta_min: float = 0.1, beta_max: float = 10.0) -> DiffusionSchedule:
    if T < 1:
        raise ValueError(f"need at least one denoising step, got T={T}")
    if not 0 < beta_min < beta_max:
        raise ValueError(f"need 0 < beta_min < beta_max, got {beta_min}, {beta_max}")
    t = np.arange(1, T + 1, dtype=np.float64)
    beta = 1.0 - np.exp(-beta_min / T - (2.0 * t - 1.0) / (2.0 * T * T) * (beta_max - beta_min))
    beta = np.concatenate([[0.0], beta])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    tilde_beta = np.zeros(T + 1)
    tilde_beta[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return DiffusionSchedule(T, beta_min, beta_max, beta, alpha, alpha_bar, tilde_beta)


def forward_marginal(x0, t: int, schedule: DiffusionSchedule, noise) -> np.ndarray:
    """Closed-form noised sample x_t given x_0 (used to check the reverse chain)."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ValueError(f"x0 shape {x0.shape} != noise shape {noise.shape}")
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step {t} outside 1..{schedule.T}")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def forward_transition(x_prev, t: int, schedule: DiffusionSchedule, noise) -> np.ndarray:
    """One noising step q(x_t | x_{t-1})."""
    b = schedule.beta[t]
    return np.sqrt(1.0 - b) * np.asarray(x_prev) + np.sqrt(b) * np.asarray(noise)


def noise_scale(schedule: DiffusionSchedule, t: int, mode: str = "quadratic") -> float:
    tb = schedule.tilde_beta[t]
    if mode == "quadratic":
        return (tb / 2.0) ** 2
    if mode == "ddpm":
        return float(np.sqrt(tb))
    raise ValueError(f"unknown noise scale mode {mode!r}")


class ActorNetwork:
    """Noise predictor eps(x_t, t, s) with a Tanh head.

    The Tanh output layer is the bounded noise estimate that enters the reverse
    mean directly.
    """

    def __init__(self, state_dim: int, num_actions: int, rng: np.random.Generator,
                 hidden: int = 256, t_dim: int = 16):
        self.state_dim = state_dim
        self.num_actions = num_actions
        self.t_dim = t_dim
        self.time_mlp = build_mlp([t_dim, 2 * t_dim, t_dim], ["mish", "none"], rng)
        self.trunk = build_mlp([num_actions + state_dim + t_dim, hidden, hidden, num_actions],
                               ["mish", "mish", "tanh"], rng)

    @property
    def layers(self) -> list[DenseLayer]:
        return self.time_mlp + self.trunk

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def clone(self) -> "ActorNetwork":
        other = object.__new__(ActorNetwork)
        other.state_dim, other.num_actions, other.t_dim = self.state_dim, self.num_actions, self.t_dim
        other.time_mlp = copy_layers(self.time_mlp)
        other.trunk = copy_layers(self.trunk)
        return other

    @classmethod
    def from_layers(cls, layers: Sequence[DenseLayer]) -> "ActorNetwork":
        other = object.__new__(cls)
        other.time_mlp, other.trunk = list(layers[:2]), list(layers[2:])
        other.t_dim = other.time_mlp[0].in_dim
        other.num_actions = other.trunk[-1].out_dim
        other.state_dim = other.trunk[0].in_dim - other.num_actions - other.t_dim
        return other

    def time_embedding(self, graph: ComputeGraph, t: int) -> Tensor:
        emb = Tensor(sinusoidal_pos_emb(t, self.t_dim)[None, :])
        return forward(graph, self.time_mlp, emb)

    def eps(self, graph: ComputeGraph, x_t: Tensor, t: int, state: Tensor) -> Tensor:
        temb = self.time_embedding(graph, t)
        rows = x_t.shape[0]
        if rows != 1:
            temb = graph.matmul(Tensor(np.ones((rows, 1))), temb)
        h = graph.concat([x_t, state, temb])
        return forward(graph, self.trunk, h)


def denoise_step(x_t: Tensor, t: int, state: Tensor, actor: ActorNetwork, schedule: DiffusionSchedule,
                 noise, graph: ComputeGraph | None = None, noise_scale_mode: str = "quadratic") -> Tensor:
    """One reverse step: reverse mean from the bounded noise estimate plus scaled noise."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step {t} outside 1..{schedule.T}")
    graph = graph if graph is not None else ComputeGraph(enabled=False)
    eps = actor.eps(graph, x_t, t, state)
    c_eps = schedule.beta[t] / np.sqrt(1.0 - schedule.alpha_bar[t])
    mean = graph.scale(graph.sub(x_t, graph.scale(eps, c_eps)), 1.0 / np.sqrt(schedule.alpha[t]))
    return graph.shift(mean, noise_scale(schedule, t, noise_scale_mode) * np.asarray(noise))


@dataclass
class ActionDistribution:
    probs: np.ndarray
    x0: np.ndarray
    trace: list[np.ndarray] | None = None
    # graph handle on x0, present when sampled with gradients
    x0_tensor: Tensor | None = field(default=None, repr=False)


def _as_rows(state) -> tuple[np.ndarray, bool]:
    s = np.asarray(state, dtype=np.float64)
    if s.ndim == 1:
        return s[None, :], True
    return s, False


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _fast_mish(x: np.ndarray) -> np.ndarray:
    # inference only; exp(50) already saturates tanh(log1p(.)) to 1
    return x * np.tanh(np.log1p(np.exp(np.minimum(x, 50.0))))


def _infer_chain(actor: ActorNetwork, schedule: DiffusionSchedule, states: np.ndarray, x_T: np.ndarray,
                 step_noise: np.ndarray, noise_scale_mode: str, steps: list | None) -> np.ndarray:
    """Value-only reverse chain. Same arithmetic as the recorded path, with the
    step-embedding and state projections of the first trunk layer hoisted out
    of the loop."""
    T, I, S = schedule.T, actor.num_actions, actor.state_dim
    l0, l1 = actor.time_mlp
    emb = sinusoidal_pos_emb(np.arange(1, T + 1), actor.t_dim)
    temb = _fast_mish(emb @ l0.weights.values.T + l0.biases.values) @ l1.weights.values.T + l1.biases.values
    first, mid, last = actor.trunk
    W = first.weights.values
    w_x, w_s, w_t = W[:, :I].T, W[:, I:I + S].T, W[:, I + S:].T
    state_part = states @ w_s + first.biases.values
    time_part = temb @ w_t
    w_mid, b_mid = mid.weights.values.T, mid.biases.values
    w_last, b_last = last.weights.values.T, last.biases.values
    x = x_T
    for t in range(T, 0, -1):
        h = _fast_mish(x @ w_x + state_part + time_part[t - 1])
        h = _fast_mish(h @ w_mid + b_mid)
        eps = np.tanh(h @ w_last + b_last)
        c_eps = schedule.beta[t] / np.sqrt(1.0 - schedule.alpha_bar[t])
        x = (x - eps * c_eps) * (1.0 / np.sqrt(schedule.alpha[t])) + noise_scale(schedule, t, noise_scale_mode) * step_noise[t - 1]
        if steps is not None:
            steps.append(x)
    return x


def reverse_chain(graph: ComputeGraph, actor: ActorNetwork, schedule: DiffusionSchedule, state: Tensor,
                  rng: np.random.Generator, noise_scale_mode: str = "quadratic",
                  trace: bool = False) -> tuple[Tensor, list[np.ndarray] | None]:
    rows = state.shape[0]
    shape = (rows, actor.num_actions)
    # all noise is drawn up front so rng consumption does not depend on tracing
    x_T = rng.standard_normal(shape)
    step_noise = rng.standard_normal((schedule.T,) + shape)
    if not graph.enabled:
        steps = [x_T] if trace else None
        return Tensor(_infer_chain(actor, schedule, state.values, x_T, step_noise, noise_scale_mode, steps)), steps
    x = Tensor(x_T)
    steps = [x_T] if trace else None
    for t in range(schedule.T, 0, -1):
        x = denoise_step(x, t, state, actor, schedule, step_noise[t - 1], graph, noise_scale_mode)
        if steps is not None:
            steps.append(x.values)
    return x, steps


def sample_action_distribution(state, actor: ActorNetwork, schedule: DiffusionSchedule,
                               rng: np.random.Generator, graph: ComputeGraph | None = None,
                               noise_scale_mode: str = "quadratic", trace: bool = False) -> ActionDistribution:
    """Run the reverse chain from x_T ~ N(0, I) and softmax the result.

    Pass a recording ``graph`` to keep x_0 differentiable in the actor weights.
    A 1-D ``state`` gives 1-D outputs; a (B, S) batch gives (B, I).
    """
    rows, squeeze = _as_rows(state)
    if rows.shape[1] != actor.state_dim:
        raise ValueError(f"state dim {rows.shape[1]} != actor state dim {actor.state_dim}")
    graph_ = graph if graph is not None else ComputeGraph(enabled=False)
    x0, steps = reverse_chain(graph_, actor, schedule, Tensor(rows), rng, noise_scale_mode, trace)
    probs = softmax(x0.values)
    if squeeze:
        probs, x0v = probs[0], x0.values[0]
        steps = [s[0] for s in steps] if steps is not None else None
    else:
        x0v = x0.values
    return ActionDistribution(probs, x0v, steps, x0 if graph is not None else None)


def select_action(dist, mode: str = "sample", rng: np.random.Generator | None = None) -> int:
    probs = np.asarray(dist.probs if isinstance(dist, ActionDistribution) else dist, dtype=np.float64)
    if mode == "greedy":
        return int(np.argmax(probs))
    if mode != "sample":
        raise ValueError(f"unknown selection mode {mode!r}")
    if rng is None:
        raise ValueError("sample mode needs an rng")
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(probs) - 1)


def entropy(dist) -> np.ndarray | float:
    """Shannon entropy in nats over the last axis (0 log 0 := 0)."""
    p = np.asarray(dist.probs if isinstance(dist, ActionDistribution) else dist, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    h = -(p * np.log(safe)).sum(axis=-1)
    return float(h) if np.ndim(h) == 0 else h


TRACE_COLUMNS = ("train_step", "denoise_step", "action", "probability")


def trace_rows(train_step: int, steps: Iterable[np.ndarray]) -> list[tuple]:
    """Flatten a recorded chain (x_T first, x_0 last) into CSV rows of softmax
    probabilities; ``denoise_step`` counts down from T to 0."""
    steps = list(steps)
    T = len(steps) - 1
    rows = []
    for k, x in enumerate(steps):
        for a, p in enumerate(softmax(np.asarray(x))):
            rows.append((train_step, T - k, a, float(p)))
    return rows


def write_trace_csv(path, rows: Iterable[tuple], append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if not append or fh.tell() == 0:
            w.writerow(TRACE_COLUMNS)
        for row in rows:
            w.writerow([row[0], row[1], row[2], repr(row[3])])
