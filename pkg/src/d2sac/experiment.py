"""Running experiments: per-seed training or heuristic evaluation, summary
tables, parameter sweeps and long-format plot data."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .agod import ActorNetwork, build_vp_schedule, trace_rows, write_trace_csv
from .baselines import HEURISTICS, MlpActor, make_heuristic
from .config import ExperimentConfig, config_hash, derive_rng, derive_seed, serialize_config
from .env import AspEnv, AspProfile, EnvConfig, TaskRequest, generate_fleet, generate_workload
from .nn import ComputeGraph, Tensor, load_checkpoint
from .trainer import (
    EVAL_KEYS, METRIC_COLUMNS, DiffusionPolicy, SoftmaxPolicy, TrainConfig, evaluate, greedy_chooser, train,
)

log = logging.getLogger(__name__)


class OutputExistsError(FileExistsError):
    pass


# -- per-seed setup -----------------------------------------------------------


@dataclass
class RunSetup:
    fleet: list[AspProfile]
    env: AspEnv
    eval_env: AspEnv
    eval_workloads: list[list[TaskRequest]]
    final_workloads: list[list[TaskRequest]]


def _workloads(rng: np.random.Generator, env_cfg: EnvConfig, n: int) -> list[list[TaskRequest]]:
    return [generate_workload(rng, env_cfg.num_tasks, env_cfg.arrival_rate, env_cfg.step_range,
                              env_cfg.duration_range) for _ in range(n)]


def build_setup(env_cfg: EnvConfig, train_cfg: TrainConfig, seed: int) -> RunSetup:
    """Fleet, training env and held-out evaluation workloads for one seed.

    Every policy evaluated under the same (config, seed) sees the same fleet and
    the same held-out workloads, which is what makes cross-policy comparisons
    paired.
    """
    fleet = generate_fleet(derive_rng(seed, "fleet"), env_cfg)
    env = AspEnv(env_cfg, fleet, derive_rng(seed, "workload"))
    eval_env = AspEnv(env_cfg, fleet)
    rng = derive_rng(seed, "eval_workload")
    eval_wl = _workloads(rng, env_cfg, train_cfg.eval_episodes)
    final_wl = _workloads(rng, env_cfg, train_cfg.final_eval_episodes)
    return RunSetup(fleet, env, eval_env, eval_wl, final_wl)


class HeuristicChooser:
    """Adapts a heuristic to the evaluator's ``choose(obs, env)`` protocol."""

    def __init__(self, name: str, env: AspEnv, seed: int):
        self.policy = make_heuristic(name, env)
        self.rng = derive_rng(seed, "heuristic")

    def reset(self) -> None:
        self.policy.reset()

    def __call__(self, obs, env) -> int:
        return self.policy.act(obs, self.rng)


# -- single seed --------------------------------------------------------------


@dataclass
class SeedResult:
    seed: int
    metrics: list[dict]
    final_eval: dict[str, float]
    wall_time_s: float
    error: str | None = None


def run_seed(cfg: ExperimentConfig, seed: int, checkpoint_dir: str | None = None,
             trace_path: str | None = None) -> SeedResult:
    setup = build_setup(cfg.env, cfg.train, seed)
    eval_seed = derive_seed(seed, "eval_noise")
    if cfg.policy in HEURISTICS:
        t0 = time.perf_counter()
        test = evaluate(HeuristicChooser(cfg.policy, setup.eval_env, seed), setup.eval_env, setup.eval_workloads)
        final = evaluate(HeuristicChooser(cfg.policy, setup.eval_env, seed), setup.eval_env, setup.final_workloads)
        wall = time.perf_counter() - t0
        row = dict.fromkeys(METRIC_COLUMNS, float("nan"))
        row.update(step=0, env_steps=0, test_reward=test["reward"], crashed_rate=test["crashed_rate"],
                   finished_rate=test["finished_rate"], wall_time_s=wall if cfg.train.record_wall_time else 0.0)
        return SeedResult(seed, [row], final, wall)

    if trace_path is not None and cfg.policy == "d2sac":
        state = None

        def tracer(step, agent):
            nonlocal state
            if state is None:
                setup.eval_env.reset(setup.eval_workloads[0])
                state = setup.eval_env.observe()
            if step % cfg.train.eval_every == 0 or step == cfg.train.train_steps:
                _, steps = agent.actor.logits(ComputeGraph(enabled=False), Tensor(state[None]),
                                              np.random.default_rng(eval_seed), trace=True)
                write_trace_csv(trace_path, trace_rows(step, [x[0] for x in steps]), append=os.path.exists(trace_path))
    else:
        tracer = None

    result = train(cfg.train, setup.env, setup.eval_env, setup.eval_workloads, seed, cfg.policy,
                   final_workloads=setup.final_workloads, eval_seed=eval_seed, checkpoint_dir=checkpoint_dir,
                   manifest={"config_hash": config_hash(cfg)}, on_step=tracer)
    return SeedResult(seed, result.metrics, result.final_eval, result.wall_time_s)


# -- files --------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def write_metrics_csv(path, rows: list[dict], columns=METRIC_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def prepare_out_dir(path: str, overwrite: bool) -> None:
    if os.path.exists(path) and (not os.path.isdir(path) or os.listdir(path)):
        if not overwrite:
            raise OutputExistsError(f"{path} already exists; pass overwrite to replace it")
        shutil.rmtree(path) if os.path.isdir(path) else os.remove(path)
    os.makedirs(path, exist_ok=True)


def seed_dir(out: str, seed: int) -> str:
    return os.path.join(out, f"seed_{seed}")


def summarize(results: list[SeedResult]) -> list[dict]:
    """Mean and population std across seeds of each metric's final value.

    Test metrics use the last evaluated row; ``final_*`` entries come from the
    held-out end-of-run evaluation.
    """
    finals: dict[str, list[float]] = {}
    for res in results:
        last = res.metrics[-1]
        for col in METRIC_COLUMNS:
            finals.setdefault(col, []).append(float(last[col]))
        for key in EVAL_KEYS:
            finals.setdefault(f"final_{key}", []).append(float(res.final_eval[key]))
    rows = []
    for name, vals in finals.items():
        arr = np.asarray(vals, dtype=np.float64)
        rows.append({"metric": name, "mean": float(arr.mean()), "std": float(arr.std()), "n": len(vals)})
    return rows


def write_summary_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("metric", "mean", "std", "n"))
        for r in rows:
            w.writerow((r["metric"], repr(r["mean"]), repr(r["std"]), r["n"]))


def read_summary_csv(path) -> dict[str, dict]:
    with open(path, newline="") as fh:
        return {r["metric"]: {"mean": float(r["mean"]), "std": float(r["std"]), "n": int(r["n"])}
                for r in csv.DictReader(fh)}


@dataclass
class ExperimentResult:
    out: str
    seeds: list[SeedResult] = field(default_factory=list)
    failures: dict[int, str] = field(default_factory=dict)
    summary: list[dict] = field(default_factory=list)

    def final(self, key: str = "reward") -> list[float]:
        return [r.final_eval[key] for r in self.seeds]


def run_experiment(cfg: ExperimentConfig, overwrite: bool = False, trace: bool = False) -> ExperimentResult:
    """Train (or evaluate, for heuristics) one run per seed and write::

        out/config.txt          the exact configuration
        out/manifest.json       config hash, seeds, failures
        out/summary.csv         mean/std across seeds
        out/seed_N/metrics.csv  one row per training step
        out/seed_N/final.json   held-out end-of-run evaluation
        out/seed_N/checkpoint/  learned policies only

    A seed that fails is recorded in the manifest and the others still run.
    """
    cfg.validate()
    prepare_out_dir(cfg.out, overwrite)
    text = serialize_config(cfg)
    with open(os.path.join(cfg.out, "config.txt"), "w") as fh:
        fh.write(text)
    result = ExperimentResult(cfg.out)
    for seed in cfg.seeds:
        sdir = seed_dir(cfg.out, seed)
        os.makedirs(sdir, exist_ok=True)
        ckpt = None if cfg.policy in HEURISTICS else os.path.join(sdir, "checkpoint")
        trace_path = os.path.join(sdir, "trace.csv") if trace else None
        try:
            res = run_seed(cfg, seed, ckpt, trace_path)
        except OSError:
            raise
        except Exception as exc:  # noqa: BLE001 - recorded, remaining seeds continue
            log.exception("seed %d failed", seed)
            result.failures[seed] = f"{type(exc).__name__}: {exc}"
            continue
        write_metrics_csv(os.path.join(sdir, "metrics.csv"), res.metrics)
        with open(os.path.join(sdir, "final.json"), "w") as fh:
            json.dump(res.final_eval, fh, indent=2, sort_keys=True)
        result.seeds.append(res)
    if result.seeds:
        result.summary = summarize(result.seeds)
        write_summary_csv(os.path.join(cfg.out, "summary.csv"), result.summary)
    manifest = {
        "config_hash": config_hash(cfg),
        "policy": cfg.policy,
        "seeds": list(cfg.seeds),
        "completed": [r.seed for r in result.seeds],
        "failures": {str(k): v for k, v in result.failures.items()},
        "version": __version__,
    }
    with open(os.path.join(cfg.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return result


def verify_manifest(out: str) -> bool:
    """True when the stored hash matches a recomputation from config.txt."""
    from .config import parse_config

    with open(os.path.join(out, "manifest.json")) as fh:
        manifest = json.load(fh)
    with open(os.path.join(out, "config.txt")) as fh:
        cfg = parse_config(fh.read())
    return manifest["config_hash"] == config_hash(cfg)


# -- loading a trained policy -------------------------------------------------


def load_policy(checkpoint_dir: str, train_cfg: TrainConfig):
    with open(os.path.join(checkpoint_dir, "manifest.json")) as fh:
        kind = json.load(fh)["actor_kind"]
    layers = load_checkpoint(os.path.join(checkpoint_dir, "actor.agod"))
    if kind == "d2sac":
        schedule = build_vp_schedule(train_cfg.denoise_steps, train_cfg.beta_min, train_cfg.beta_max)
        return DiffusionPolicy(ActorNetwork.from_layers(layers), schedule, train_cfg.noise_scale_mode)
    return SoftmaxPolicy(MlpActor.from_layers(layers))


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint_dir: str, seed: int) -> dict[str, float]:
    setup = build_setup(cfg.env, cfg.train, seed)
    policy = load_policy(checkpoint_dir, cfg.train)
    choose = greedy_chooser(policy, derive_seed(seed, "eval_noise") + 1)
    return evaluate(choose, setup.eval_env, setup.final_workloads)


# -- sweeps -------------------------------------------------------------------


SWEEP_TARGETS = {
    "denoise_steps": ("train", "denoise_steps", int),
    "alpha": ("train", "alpha", float),
    "lambda": ("env", "arrival_rate", float),
}


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple
    seeds: tuple[int, ...] = (0,)

    def validate(self) -> None:
        if self.parameter not in SWEEP_TARGETS:
            raise ValueError(f"parameter {self.parameter!r} is not sweepable; expected one of {tuple(SWEEP_TARGETS)}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if not self.seeds:
            raise ValueError("sweep needs at least one seed")

    def config_for(self, base: ExperimentConfig, value) -> ExperimentConfig:
        section, name, kind = SWEEP_TARGETS[self.parameter]
        if section == "train":
            cfg = replace(base, train=replace(base.train, **{name: kind(value)}))
        else:
            cfg = replace(base, env=replace(base.env, **{name: kind(value)}))
        cfg.validate()
        return cfg


SWEEP_COLUMNS = ("kind", "parameter", "value", "seed", "final_test_reward", "wall_time_s",
                 "reward_std", "reward_norm", "wall_time_norm")


def _norm(values: list[float]) -> list[float]:
    top = max(values)
    return [v / top if top != 0 else float("nan") for v in values]


def run_sweep(spec: SweepSpec, base: ExperimentConfig, out: str | None = None,
              overwrite: bool = False) -> list[dict]:
    """One run per (value, seed), then one aggregate row per value with the
    seed-mean reward and wall time, each also divided by its maximum over values.

    Wall time is the training loop only, so it tracks per-step cost.
    """
    spec.validate()
    if out is not None:
        prepare_out_dir(out, overwrite)
    nan = float("nan")
    runs = []
    for value in spec.values:
        cfg = spec.config_for(base, value)
        for seed in spec.seeds:
            res = run_seed(cfg, seed)
            runs.append({"kind": "run", "parameter": spec.parameter, "value": value, "seed": seed,
                         "final_test_reward": res.final_eval["reward"], "wall_time_s": res.wall_time_s,
                         "reward_std": nan, "reward_norm": nan, "wall_time_norm": nan})
    agg = []
    for value in spec.values:
        rs = [r for r in runs if r["value"] == value]
        rewards = np.array([r["final_test_reward"] for r in rs])
        agg.append({"kind": "aggregate", "parameter": spec.parameter, "value": value, "seed": -1,
                    "final_test_reward": float(rewards.mean()),
                    "wall_time_s": float(np.mean([r["wall_time_s"] for r in rs])),
                    "reward_std": float(rewards.std())})
    for row, rn, wn in zip(agg, _norm([a["final_test_reward"] for a in agg]), _norm([a["wall_time_s"] for a in agg])):
        row["reward_norm"], row["wall_time_norm"] = rn, wn
    rows = runs + agg
    if out is not None:
        write_sweep_csv(os.path.join(out, "sweep.csv"), rows)
        with open(os.path.join(out, "config.txt"), "w") as fh:
            fh.write(serialize_config(base))
        with open(os.path.join(out, "manifest.json"), "w") as fh:
            json.dump({"config_hash": config_hash(base), "parameter": spec.parameter,
                       "values": list(spec.values), "seeds": list(spec.seeds), "version": __version__},
                      fh, indent=2, sort_keys=True)
    return rows


def write_sweep_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r["kind"], r["parameter"], repr(r["value"]), r["seed"]]
                       + [repr(float(r[c])) for c in SWEEP_COLUMNS[4:]])


def read_sweep_csv(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {"kind": r["kind"], "parameter": r["parameter"], "value": float(r["value"]), "seed": int(r["seed"])}
            row.update({c: float(r[c]) for c in SWEEP_COLUMNS[4:]})
            out.append(row)
    return out


# -- plot data ----------------------------------------------------------------


PLOT_COLUMNS = ("series", "x", "y", "seed")


def _finite(rows):
    return [r for r in rows if all(math.isfinite(v) for v in (r[1], r[2]))]


def _write_long(path, rows) -> int:
    rows = _finite(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLOT_COLUMNS)
        for series, x, y, seed in rows:
            w.writerow((series, repr(float(x)), repr(float(y)), seed))
    return len(rows)


def _experiment_dirs(root: str) -> list[str]:
    found = []
    for dirpath, dirnames, filenames in os.walk(root):
        if "manifest.json" in filenames and "config.txt" in filenames:
            found.append(dirpath)
            dirnames[:] = [d for d in dirnames if not d.startswith("seed_")]
    return sorted(found)


def emit_plot_data(metrics_dir: str, dest: str | None = None) -> dict[str, object]:
    """Collect every experiment and sweep under ``metrics_dir`` into long-format
    CSVs (series, x, y, seed) in ``dest`` (default ``metrics_dir/plots``).

    Returns a report mapping output names to row counts, plus ``missing`` for
    experiment directories whose files could not be read.
    """
    if not os.path.isdir(metrics_dir):
        raise FileNotFoundError(f"{metrics_dir} is not a directory")
    dest = dest or os.path.join(metrics_dir, "plots")
    os.makedirs(dest, exist_ok=True)
    curves, traces, sweeps, missing = [], [], [], []
    for exp in _experiment_dirs(metrics_dir):
        with open(os.path.join(exp, "manifest.json")) as fh:
            manifest = json.load(fh)
        if "parameter" in manifest:
            path = os.path.join(exp, "sweep.csv")
            if not os.path.exists(path):
                missing.append(path)
                continue
            for r in read_sweep_csv(path):
                if r["kind"] == "aggregate":
                    sweeps.append((f"{r['parameter']}:reward_norm", r["value"], r["reward_norm"], -1))
                    sweeps.append((f"{r['parameter']}:wall_time_norm", r["value"], r["wall_time_norm"], -1))
                else:
                    sweeps.append((f"{r['parameter']}:final_test_reward", r["value"], r["final_test_reward"], r["seed"]))
            continue
        policy = manifest["policy"]
        for seed in manifest.get("completed", []):
            sdir = seed_dir(exp, seed)
            path = os.path.join(sdir, "metrics.csv")
            if not os.path.exists(path):
                missing.append(path)
                continue
            for row in read_metrics_csv(path):
                curves.append((policy, row["step"], row["test_reward"], seed))
            tpath = os.path.join(sdir, "trace.csv")
            if os.path.exists(tpath):
                with open(tpath, newline="") as fh:
                    for r in csv.DictReader(fh):
                        traces.append((f"step{r['train_step']}:action{r['action']}",
                                       float(r["denoise_step"]), float(r["probability"]), seed))
    report: dict[str, object] = {
        "reward_curves.csv": _write_long(os.path.join(dest, "reward_curves.csv"), curves),
        "diffusion_traces.csv": _write_long(os.path.join(dest, "diffusion_traces.csv"), traces),
        "sweeps.csv": _write_long(os.path.join(dest, "sweeps.csv"), sweeps),
    }
    report["missing"] = missing
    return report
