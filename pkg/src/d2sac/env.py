"""Discrete-event simulator for assigning generation tasks to capacity-limited
service providers (ASPs).

Time only advances at task arrivals. Each transition places the current task
on the chosen ASP, then moves the clock to the next arrival, releasing and
crediting every task that finished in between. Overloading an ASP crashes it:
the arriving task is discarded and every task running there restarts from
scratch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


class InvalidField(ValueError):
    """A config value out of range; ``field`` names the offending attribute."""

    def __init__(self, field: str, message: str):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class EnvConfig:
    num_asps: int = 20
    capacity_range: tuple[int, int] = (400, 1000)
    step_range: tuple[int, int] = (100, 250)
    duration_range: tuple[float, float] = (5000.0, 40000.0)
    arrival_rate: float = 0.001
    num_tasks: int = 1000
    episode_length: int = 1000
    a_x_range: tuple[float, float] = (0.0, 100.0)
    a_y_range: tuple[float, float] = (0.0, 0.5)
    b_x_range: tuple[float, float] = (150.0, 250.0)
    b_y_range: tuple[float, float] = (0.5, 1.0)
    crash_penalty: float = 2.0
    reward_baseline: float = 0.0

    def validate(self) -> None:
        if self.num_asps < 1:
            raise InvalidField("num_asps", "num_asps must be at least 1")
        if self.num_tasks < 1:
            raise InvalidField("num_tasks", "num_tasks must be at least 1")
        if not 1 <= self.episode_length <= self.num_tasks:
            raise InvalidField("episode_length", "episode_length must lie in [1, num_tasks]")
        if self.arrival_rate <= 0:
            raise InvalidField("arrival_rate", "arrival_rate must be positive")
        for name in ("capacity_range", "step_range", "duration_range",
                     "a_x_range", "a_y_range", "b_x_range", "b_y_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidField(name, f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.capacity_range[0] <= 0 or self.step_range[0] < 0 or self.duration_range[0] <= 0:
            raise InvalidField("capacity_range", "capacities and durations must be positive, steps nonnegative")
        if self.a_x_range[1] >= self.b_x_range[0]:
            raise InvalidField("a_x_range", "a_x_range must lie strictly below b_x_range")
        if self.a_y_range[0] < 0 or self.b_y_range[1] > 1 or self.a_y_range[1] > self.b_y_range[0]:
            raise InvalidField("a_y_range", "utility levels must satisfy 0 <= A_y <= B_y <= 1")

    @property
    def obs_dim(self) -> int:
        return 2 + 2 * self.num_asps


@dataclass(frozen=True)
class TaskRequest:
    id: int
    arrival_time: float
    steps: int
    duration: float


@dataclass(frozen=True)
class AspProfile:
    capacity: int
    a_x: float
    a_y: float
    b_x: float
    b_y: float


@dataclass
class RunningTask:
    id: int
    steps: int
    duration: float
    start: float
    finish: float


@dataclass
class AspState:
    profile: AspProfile
    running: list[RunningTask] = field(default_factory=list)
    held: int = 0  # sum of steps over ``running``, kept in sync by the env

    @property
    def available(self) -> int:
        return self.profile.capacity - self.held


@dataclass
class StepInfo:
    completed: list[int]
    crashed: bool
    interrupted: list[int]
    credits: float
    penalty: float
    utility_gained: float
    utility_lost: float
    # per completed task: (id, credited reward); lets trainers re-attribute credit
    completion_credits: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class StepOutcome:
    reward: float
    observation: np.ndarray
    done: bool
    info: StepInfo


def utility(asp: AspProfile, steps: float) -> float:
    """Piecewise-linear quality: flat A_y up to A_x, ramp to B_y at B_x, flat after."""
    if steps <= asp.a_x:
        return asp.a_y
    if steps >= asp.b_x:
        return asp.b_y
    return asp.a_y + (asp.b_y - asp.a_y) * (steps - asp.a_x) / (asp.b_x - asp.a_x)


def generate_workload(rng: np.random.Generator, num_tasks: int, arrival_rate: float,
                      step_range=(100, 250), duration_range=(5000.0, 40000.0)) -> list[TaskRequest]:
    if arrival_rate <= 0 or num_tasks < 1:
        raise ValueError("need arrival_rate > 0 and num_tasks >= 1")
    if step_range[0] > step_range[1] or duration_range[0] > duration_range[1]:
        raise ValueError("empty step or duration range")
    gaps = rng.exponential(1.0 / arrival_rate, size=num_tasks)
    arrivals = np.cumsum(gaps)
    steps = rng.integers(step_range[0], step_range[1], size=num_tasks, endpoint=True)
    durations = rng.uniform(duration_range[0], duration_range[1], size=num_tasks)
    return [TaskRequest(i, float(a), int(s), float(d)) for i, (a, s, d) in enumerate(zip(arrivals, steps, durations))]


def generate_fleet(rng: np.random.Generator, config: EnvConfig) -> list[AspProfile]:
    n = config.num_asps
    caps = rng.integers(config.capacity_range[0], config.capacity_range[1], size=n, endpoint=True)
    ax = rng.uniform(*config.a_x_range, size=n)
    ay = rng.uniform(*config.a_y_range, size=n)
    bx = rng.uniform(*config.b_x_range, size=n)
    by = rng.uniform(*config.b_y_range, size=n)
    return [AspProfile(int(c), float(a), float(b), float(d), float(e)) for c, a, b, d, e in zip(caps, ax, ay, bx, by)]


def normalize(x, x_max):
    """Affine map into the open unit interval: (x + 1) / (x_max + 2)."""
    return (np.asarray(x, dtype=np.float64) + 1.0) / (np.asarray(x_max, dtype=np.float64) + 2.0)


def obs_field_max(config: EnvConfig) -> np.ndarray:
    x_max = np.full(config.obs_dim, float(config.capacity_range[1]))
    x_max[0] = config.step_range[1]
    x_max[1] = config.duration_range[1]
    return x_max


def normalize_obs(raw: np.ndarray, config: EnvConfig) -> np.ndarray:
    """Normalize ``[T, o, cap_1, avail_1, ...]`` field by field."""
    return normalize(raw, obs_field_max(config))


class AspEnv:
    """Single-owner simulator instance. ``reset`` draws a fresh workload from the
    env's own rng unless one is passed in."""

    def __init__(self, config: EnvConfig, fleet: list[AspProfile], rng: np.random.Generator | None = None):
        config.validate()
        if len(fleet) != config.num_asps:
            raise ValueError(f"fleet has {len(fleet)} ASPs, config expects {config.num_asps}")
        self.config = config
        self.fleet = list(fleet)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._caps = np.array([p.capacity for p in self.fleet], dtype=np.float64)
        self._obs_max = obs_field_max(config)
        self.asps: list[AspState] = []
        self.workload: list[TaskRequest] = []
        self.index = 0
        self.clock = 0.0
        self.done = True

    @property
    def num_actions(self) -> int:
        return self.config.num_asps

    @property
    def current_task(self) -> TaskRequest:
        return self.workload[self.index]

    def reset(self, workload: list[TaskRequest] | None = None) -> np.ndarray:
        c = self.config
        if workload is None:
            workload = generate_workload(self.rng, c.num_tasks, c.arrival_rate, c.step_range, c.duration_range)
        if len(workload) < c.episode_length:
            raise ValueError(f"workload has {len(workload)} tasks, episode needs {c.episode_length}")
        self.workload = list(workload)
        self.asps = [AspState(p) for p in self.fleet]
        self.index = 0
        self.clock = self.workload[0].arrival_time
        self.done = False
        self.arrived = 0
        self.finished = 0
        self.crashed = 0
        self.interruptions = 0
        self.obtained_utility = 0.0
        self.lost_utility = 0.0
        self.total_penalty = 0.0
        self.total_reward = 0.0
        self._utility_of: dict[int, float] = {}
        return self.observe()

    def available(self) -> np.ndarray:
        return np.array([a.profile.capacity - a.held for a in self.asps], dtype=np.int64)

    def raw_state(self) -> np.ndarray:
        raw = np.empty(self.config.obs_dim)
        if self.done:
            raw[:2] = 0.0
        else:
            task = self.current_task
            raw[0], raw[1] = task.steps, task.duration
        raw[2::2] = self._caps
        raw[3::2] = self._caps - np.array([a.held for a in self.asps])
        return raw

    def observe(self) -> np.ndarray:
        return normalize(self.raw_state(), self._obs_max)

    def _release_until(self, now: float) -> list[tuple[int, float]]:
        done = []
        for i, asp in enumerate(self.asps):
            if not any(r.finish <= now for r in asp.running):
                continue
            keep = []
            for r in asp.running:
                if r.finish <= now:
                    done.append((r.finish, r.id, i))
                    asp.held -= r.steps
                else:
                    keep.append(r)
            asp.running = keep
        done.sort()
        out = []
        for _, tid, i in done:
            u = self._utility_of.pop(tid)
            out.append((tid, u))
        return out

    def step(self, action: int) -> StepOutcome:
        if self.done:
            raise RuntimeError("episode is done; call reset()")
        if not 0 <= int(action) < self.config.num_asps:
            raise ValueError(f"action {action} outside [0, {self.config.num_asps})")
        c = self.config
        task = self.current_task
        asp = self.asps[int(action)]
        now = self.clock
        self.arrived += 1
        u = utility(asp.profile, task.steps)
        penalty = 0.0
        interrupted: list[int] = []
        lost = 0.0
        crashed = task.steps + asp.held > asp.profile.capacity
        if crashed:
            penalty = c.crash_penalty
            for r in asp.running:
                remaining = (r.finish - now) / r.duration
                penalty += c.crash_penalty * remaining
                r.start, r.finish = now, now + r.duration
                interrupted.append(r.id)
            self.crashed += 1
            self.interruptions += len(interrupted)
            lost = u
            self.lost_utility += u
        else:
            asp.running.append(RunningTask(task.id, task.steps, task.duration, now, now + task.duration))
            asp.held += task.steps
            self._utility_of[task.id] = u

        self.index += 1
        completions: list[tuple[int, float]] = []
        if self.index >= c.episode_length:
            self.done = True
        else:
            self.clock = self.current_task.arrival_time
            completions = self._release_until(self.clock)

        gained = sum(u_ for _, u_ in completions)
        credits = [(tid, u_ - c.reward_baseline) for tid, u_ in completions]
        credit_sum = sum(cr for _, cr in credits)
        self.finished += len(completions)
        self.obtained_utility += gained
        self.total_penalty += penalty
        reward = credit_sum - penalty
        self.total_reward += reward
        info = StepInfo([tid for tid, _ in completions], crashed, interrupted, credit_sum, penalty,
                        gained, lost, credits)
        return StepOutcome(reward, self.observe(), self.done, info)

    def drain(self) -> list[tuple[int, float]]:
        """Credits of tasks still running at episode end, as if the clock ran on.

        Does not touch the episode ledger; used only for training-time credit
        assignment.
        """
        b = self.config.reward_baseline
        pending = sorted((r.finish, r.id) for a in self.asps for r in a.running)
        return [(tid, self._utility_of[tid] - b) for _, tid in pending]

    @property
    def running_count(self) -> int:
        return sum(len(a.running) for a in self.asps)

    def metrics(self) -> dict[str, float]:
        n = max(self.arrived, 1)
        return {
            "reward": self.total_reward,
            "finished_rate": self.finished / n,
            "crashed_rate": self.crashed / n,
            "obtained_utility": self.obtained_utility,
            "lost_utility": self.lost_utility,
            "penalty": self.total_penalty,
            "arrived": self.arrived,
            "finished": self.finished,
            "crashed": self.crashed,
            "running": self.running_count,
        }


# -- CSV interchange --------------------------------------------------------

WORKLOAD_COLUMNS = ("id", "arrival_time", "steps", "duration")
FLEET_COLUMNS = ("asp_id", "capacity", "A_x", "A_y", "B_x", "B_y")


def write_workload_csv(path, workload: list[TaskRequest]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(WORKLOAD_COLUMNS)
        for t in workload:
            w.writerow([t.id, repr(t.arrival_time), t.steps, repr(t.duration)])


def read_workload_csv(path) -> list[TaskRequest]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [TaskRequest(int(r["id"]), float(r["arrival_time"]), int(r["steps"]), float(r["duration"])) for r in rows]


def write_fleet_csv(path, fleet: list[AspProfile]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FLEET_COLUMNS)
        for i, a in enumerate(fleet):
            w.writerow([i, a.capacity, repr(a.a_x), repr(a.a_y), repr(a.b_x), repr(a.b_y)])


def read_fleet_csv(path) -> list[AspProfile]:
    with open(path, newline="") as fh:
        rows = sorted(csv.DictReader(fh), key=lambda r: int(r["asp_id"]))
    return [AspProfile(int(r["capacity"]), float(r["A_x"]), float(r["A_y"]), float(r["B_x"]), float(r["B_y"])) for r in rows]
