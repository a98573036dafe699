"""Experiment configuration: flat ``section.key = value`` text, presets, stable
hashing and labeled seed streams."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .env import EnvConfig, InvalidField
from .trainer import TrainConfig

# fixed offsets so adding a consumer never shifts an existing stream
SEED_LABELS = {
    "fleet": 1,
    "workload": 2,
    "eval_workload": 3,
    "actor_init": 4,
    "critic_init": 5,
    "replay": 6,
    "diffusion": 7,
    "action": 8,
    "eval_noise": 9,
    "heuristic": 10,
}


def derive_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), SEED_LABELS[label]]))


def derive_seed(seed: int, label: str) -> int:
    return int(np.random.SeedSequence([int(seed), SEED_LABELS[label]]).generate_state(1)[0])


POLICIES = ("random", "round_robin", "crash_avoid", "prophet", "sac_mlp", "d2sac")


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    policy: str = "d2sac"
    seeds: tuple[int, ...] = (0,)
    out: str = "runs/default"

    def validate(self) -> None:
        for section, obj in (("env", self.env), ("train", self.train)):
            try:
                obj.validate()
            except InvalidField as exc:
                raise ConfigError(f"{section}.{exc.field}", str(exc)) from None
        if self.policy not in POLICIES:
            raise ConfigError("experiment.policy", f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if not self.seeds:
            raise ConfigError("experiment.seeds", "at least one seed is required")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message


PRESETS = {
    "full": {},
    "desk": {
        "train.train_steps": "300",
        "train.collect_per_step": "300",
        "env.episode_length": "300",
        "env.num_tasks": "300",
    },
}

_EXPERIMENT_KEYS = {"policy", "seeds", "out"}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.replace(" ", "").split(",") if p]
            if not default:
                return tuple(int(p) for p in parts)
            elem = type(default[0])
            vals = tuple(elem(p) if elem is not float else float(p) for p in parts)
            if len(default) == 2 and len(vals) != 2:
                raise ValueError(f"expected two comma-separated values, got {raw!r}")
            return vals
        return raw
    except ValueError as exc:
        raise ConfigError(key, f"malformed value: {exc}") from None


def _pairs(text: str) -> list[tuple[str, str]]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out.append((key.strip(), value.strip()))
    return out


def apply_overrides(base: ExperimentConfig, pairs) -> ExperimentConfig:
    env_kw: dict = {}
    train_kw: dict = {}
    exp_kw: dict = {}
    for key, raw in pairs:
        section, _, name = key.partition(".")
        if section == "env" and name in {f.name for f in dataclasses.fields(EnvConfig)}:
            env_kw[name] = _coerce(key, raw, getattr(base.env, name))
        elif section == "train" and name in {f.name for f in dataclasses.fields(TrainConfig)}:
            train_kw[name] = _coerce(key, raw, getattr(base.train, name))
        elif section == "experiment" and name in _EXPERIMENT_KEYS:
            exp_kw[name] = _coerce(key, raw, getattr(base, name))
        else:
            raise ConfigError(key, "unknown key")
    cfg = replace(base, env=replace(base.env, **env_kw), train=replace(base.train, **train_kw), **exp_kw)
    cfg.validate()
    return cfg


def parse_config(text: str, preset: str | None = None) -> ExperimentConfig:
    """Parse flat ``section.key = value`` text on top of the defaults (or a
    named preset). Sections: ``env``, ``train``, ``experiment``."""
    base = ExperimentConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}")
        base = apply_overrides(base, PRESETS[preset].items())
    return apply_overrides(base, _pairs(text))


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(EnvConfig):
        lines.append(f"env.{f.name}={_format(getattr(cfg.env, f.name))}")
    for f in dataclasses.fields(TrainConfig):
        lines.append(f"train.{f.name}={_format(getattr(cfg.train, f.name))}")
    for name in sorted(_EXPERIMENT_KEYS):
        lines.append(f"experiment.{name}={_format(getattr(cfg, name))}")
    return "\n".join(sorted(lines)) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()
