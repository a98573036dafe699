"""Command line: ``python -m d2sac {train,eval,sweep,export-plots}``.

Failures exit nonzero after printing one JSON object on stderr, e.g.
``{"error": "ConfigError", "key": "train.gamma", "message": "..."}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from .config import POLICIES, PRESETS, ConfigError, ExperimentConfig, parse_config
from .experiment import (
    SWEEP_TARGETS, OutputExistsError, SweepSpec, emit_plot_data, evaluate_checkpoint, run_experiment, run_sweep,
)


class UsageError(ValueError):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat key=value config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named bundle of overrides applied before --config")
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--seed", type=int, action="append", dest="seeds", metavar="N",
                   help="repeatable; overrides experiment.seeds")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--overwrite", action="store_true", help="replace an existing output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="extra config override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="d2sac", description="Diffusion soft actor-critic for ASP selection.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train (or evaluate a heuristic) for each seed")
    _common(p)
    p.add_argument("--trace", action="store_true", help="record reverse-chain probabilities")

    p = sub.add_parser("eval", help="evaluate a heuristic or a saved checkpoint on held-out workloads")
    _common(p)
    p.add_argument("--checkpoint", metavar="DIR", help="checkpoint directory of a trained policy")

    p = sub.add_parser("sweep", help="sweep one parameter over values and seeds")
    _common(p)
    p.add_argument("--param", required=True, choices=sorted(SWEEP_TARGETS))
    p.add_argument("--values", required=True, help="comma-separated values")

    p = sub.add_parser("export-plots", help="write long-format plot CSVs from a results tree")
    p.add_argument("metrics_dir")
    p.add_argument("--out", metavar="DIR", help="destination (default METRICS_DIR/plots)")
    return parser


def load_config(args) -> ExperimentConfig:
    text = ""
    if args.config:
        with open(args.config) as fh:
            text = fh.read()
    extra = []
    for item in args.set:
        if "=" not in item:
            raise ConfigError(item, "expected KEY=VALUE")
        extra.append(item)
    cfg = parse_config(text + "\n" + "\n".join(extra), preset=args.preset)
    if args.policy:
        cfg = replace(cfg, policy=args.policy)
    if args.seeds:
        cfg = replace(cfg, seeds=tuple(args.seeds))
    if args.out:
        cfg = replace(cfg, out=args.out)
    cfg.validate()
    return cfg


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_train(args) -> int:
    cfg = load_config(args)
    res = run_experiment(cfg, overwrite=args.overwrite, trace=args.trace)
    _print({"out": cfg.out, "completed": [r.seed for r in res.seeds],
            "failures": {str(k): v for k, v in res.failures.items()},
            "final_reward": {str(r.seed): r.final_eval["reward"] for r in res.seeds}})
    return 1 if res.failures else 0


def cmd_eval(args) -> int:
    cfg = load_config(args)
    if args.checkpoint:
        out = {str(s): evaluate_checkpoint(cfg, args.checkpoint, s) for s in cfg.seeds}
        _print({"checkpoint": args.checkpoint, "eval": out})
        return 0
    if cfg.policy in ("d2sac", "sac_mlp"):
        raise UsageError("evaluating a learned policy needs --checkpoint")
    res = run_experiment(cfg, overwrite=args.overwrite)
    _print({"out": cfg.out, "eval": {str(r.seed): r.final_eval for r in res.seeds}})
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    try:
        values = tuple(float(v) for v in args.values.split(",") if v.strip())
    except ValueError:
        raise ConfigError("--values", f"malformed value list {args.values!r}") from None
    if args.param == "denoise_steps":
        values = tuple(int(v) for v in values)
    spec = SweepSpec(args.param, values, cfg.seeds)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError("--param", str(exc)) from None
    rows = run_sweep(spec, cfg, out=cfg.out, overwrite=args.overwrite)
    _print({"out": cfg.out, "aggregate": [{"value": r["value"], "final_test_reward": r["final_test_reward"],
                                           "wall_time_s": r["wall_time_s"]}
                                          for r in rows if r["kind"] == "aggregate"]})
    return 0


def cmd_export(args) -> int:
    report = emit_plot_data(args.metrics_dir, args.out)
    _print(report)
    return 1 if report["missing"] else 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "export-plots": cmd_export}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        err = {"error": "ConfigError", "key": exc.key, "message": exc.message}
        code = 2
    except (OutputExistsError, UsageError, FileNotFoundError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        code = 2
    except Exception as exc:  # noqa: BLE001 - the contract is one JSON line, whatever failed
        err = {"error": type(exc).__name__, "message": str(exc)}
        code = 1
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
