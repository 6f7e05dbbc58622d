"""Command line entry point: ``popbias {run,sweep,rho-min,nonident,walk}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .environment import make_synthetic_instance
from .errors import ConfigError
from .harness import SWEEP_PARAMS, ExperimentConfig, emit_results, run_experiment, summarize, sweep

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def parse_seeds(text: str) -> list[int]:
    """``a..b`` (inclusive), ``a,b,c`` or a single integer."""
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split(".."))
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",")]
    except ValueError:
        raise ConfigError(f"bad seed list {text!r}; use a..b or a,b,c") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seeds", None):
        cfg.seeds = parse_seeds(args.seeds)
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "format", None):
        cfg.format = args.format
    if getattr(args, "bonus_scale", None) is not None:
        cfg.ranker.bonus_scale = args.bonus_scale
    if getattr(args, "horizon", None) is not None:
        cfg.horizon = args.horizon
    if getattr(args, "ranker", None):
        cfg.ranker.name = args.ranker
    cfg.validate()
    return cfg


def _print(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def cmd_run(args) -> int:
    cfg = _load_config(args)
    records = run_experiment(cfg)
    emit_results(records, cfg.out, cfg.format, metadata={"config": cfg.to_dict()})
    _print(summarize(records))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    table = sweep(cfg, args.param, _floats(args.values))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [row.to_dict() for row in table]
    with (out / f"sweep_{args.param}.csv").open("w") as fh:
        fh.write("value,final_window,early_window,final_regret\n")
        for r in rows:
            fh.write(f"{r['value']!r},{r['final_window']!r},{r['early_window']!r},{r['final_regret']!r}\n")
    _print({"param": args.param, "rows": rows})
    return EXIT_OK


def cmd_rho_min(args) -> int:
    if args.block:
        doc = json.loads(Path(args.block).read_text())
        try:
            block = analysis.CorrelationBlock(doc["sigma_qq"], doc["sigma_qp"], doc["sigma_pp"])
        except KeyError as exc:
            raise ConfigError(f"block file lacks {exc}") from None
        _print(analysis.estimate_rho_min(block, args.tol).to_dict())
        return EXIT_OK
    cfg = _load_config(args)
    results = []
    for seed in cfg.seeds:
        env = make_synthetic_instance(cfg.instance.generator_config(), np.random.default_rng([seed, 0]))
        results.append({"seed": seed, **analysis.estimate_rho_min_environment(env, tol=args.tol).to_dict()})
    _print(results)
    return EXIT_OK


def cmd_nonident(args) -> int:
    report = analysis.nonidentifiability_demo(args.epsilon, args.alpha_min, args.steps, args.seed)
    _print(report.to_dict())
    return EXIT_OK


def cmd_walk(args) -> int:
    try:
        walk = analysis.TwoItemWalkConfig.from_rank_bias(_floats(args.kappa))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    result = analysis.rank_size_empirical(walk, args.horizon, parse_seeds(args.seeds))
    _print({"p": walk.p, "q": walk.q, "rerank_bound": walk.rerank_bound, **result.to_dict()})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="popbias", description="Popularity-biased ranking simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_flags(p):
        p.add_argument("--config", help="experiment JSON document")
        p.add_argument("--seeds", help="seed list: a..b or a,b,c")
        p.add_argument("--out", help="output directory")
        p.add_argument("--format", choices=("csv", "jsonl"))
        p.add_argument("--bonus-scale", type=float, dest="bonus_scale")
        p.add_argument("--horizon", type=int)
        p.add_argument("--ranker")

    p = sub.add_parser("run", help="paired regret runs")
    experiment_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="final-window regret across one parameter")
    experiment_flags(p)
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rho-min", help="variability parameter of a block or generated instances")
    experiment_flags(p)
    p.add_argument("--block", help="JSON file with sigma_qq, sigma_qp, sigma_pp")
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_rho_min)

    p = sub.add_parser("nonident", help="two worlds indistinguishable after saturation")
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--alpha-min", type=float, default=0.02, dest="alpha_min")
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_nonident)

    p = sub.add_parser("walk", help="two-item popularity-driven random walk")
    p.add_argument("--kappa", default="1,0", help="rank bias of the two positions")
    p.add_argument("--horizon", type=int, default=50_000)
    p.add_argument("--seeds", default="0..49")
    p.set_defaults(func=cmd_walk)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
