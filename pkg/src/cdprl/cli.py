"""Command line entry point: ``cdprl run`` for one experiment, ``cdprl compare`` for a grid.

Precedence, lowest first: built-in defaults, ``--config`` JSON file, ``--set``
overrides, then the explicit flags below.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import (
    ExperimentConfig,
    ExperimentError,
    default_output_root,
    run_comparison,
    run_experiment,
)
from .replay import STRATEGIES

EXIT_OK = 0
EXIT_RUN_FAILED = 1
EXIT_BAD_CONFIG = 2

# flag dest -> dotted config path
FLAG_PATHS = {
    "env": "env.name",
    "horizon": "env.horizon",
    "n_bits": "env.n_bits",
    "epochs": "epochs",
    "episodes_per_epoch": "episodes_per_epoch",
    "eval_episodes": "eval_episodes",
    "buffer_capacity": "buffer_capacity",
    "uniform_mix": "uniform_mix",
    "td_aggregate": "td_aggregate",
    "replay_k": "her.replay_k",
    "components": "vgmm.max_components",
    "optimizer_steps": "agent.optimizer_steps_per_episode",
    "batch_size": "agent.batch_size",
}


def _assign(doc: dict, dotted: str, value) -> None:
    head, _, rest = dotted.partition(".")
    if rest:
        _assign(doc.setdefault(head, {}), rest, value)
    else:
        doc[head] = value


def _parse_set(item: str):
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ValueError(f"--set expects key=value, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def build_config(args) -> ExperimentConfig:
    doc: dict = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        if not isinstance(doc, dict):
            raise ValueError("config file must hold a JSON object")
    for item in args.set or []:
        key, value = _parse_set(item)
        _assign(doc, key, value)
    for dest, path in FLAG_PATHS.items():
        value = getattr(args, dest, None)
        if value is not None:
            _assign(doc, path, value)
    if getattr(args, "no_timing", False):
        doc["record_timing"] = False
    return ExperimentConfig.from_dict(doc)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with (possibly partial, nested) ExperimentConfig fields")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one field, e.g. agent.gamma=0.95")
    p.add_argument("--env", choices=["bitflip", "pointpush"])
    p.add_argument("--horizon", type=int)
    p.add_argument("--n-bits", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--episodes-per-epoch", type=int)
    p.add_argument("--eval-episodes", type=int)
    p.add_argument("--buffer-capacity", type=int)
    p.add_argument("--uniform-mix", type=float)
    p.add_argument("--td-aggregate", choices=["mean", "max", "sum"])
    p.add_argument("--replay-k", type=int)
    p.add_argument("--components", type=int, help="maximum mixture components")
    p.add_argument("--optimizer-steps", type=int, help="optimizer steps per episode")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--no-timing", action="store_true", help="leave overhead_seconds blank for byte-identical reruns")
    p.add_argument("--output", help="output directory (default: $CDPRL_OUTPUT_ROOT or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdprl", description="Curiosity-driven trajectory prioritization experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one (config, seed) experiment")
    _common(run)
    run.add_argument("--strategy", choices=STRATEGIES)
    run.add_argument("--seed", type=int)

    cmp_ = sub.add_parser("compare", help="run a strategy x seed grid and write summary.csv")
    _common(cmp_)
    cmp_.add_argument("--strategies", nargs="+", choices=STRATEGIES, default=list(STRATEGIES))
    cmp_.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4])
    cmp_.add_argument("--threshold", type=float, default=0.9)
    cmp_.add_argument("--workers", type=int, default=1)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = build_config(args)
        if args.command == "run":
            extra = {}
            if args.strategy is not None:
                extra["strategy"] = args.strategy
            if args.seed is not None:
                extra["seed"] = args.seed
            out = args.output or str(Path(default_output_root()) / f"{extra.get('strategy', config.strategy)}_seed{extra.get('seed', config.seed)}")
            config = ExperimentConfig.from_dict({**extra, "output_dir": out}, base=config)
    except (ValueError, TypeError, OSError) as exc:
        print(f"cdprl: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG

    if args.command == "run":
        try:
            reports = run_experiment(config)
        except ExperimentError as exc:
            print(f"cdprl: run aborted: {exc}", file=sys.stderr)
            return EXIT_RUN_FAILED
        last = reports[-1]
        print(f"{config.strategy} seed={config.seed} final_success={last.mean_success_rate:.3f} -> {config.output_dir}")
        return EXIT_OK

    root = Path(args.output or default_output_root())
    rows = run_comparison(config, args.strategies, args.seeds, root, threshold=args.threshold, workers=args.workers)
    for row in rows:
        print(
            f"{row['strategy']:8s} runs={row['runs']} failures={row['failures']} "
            f"final={row['final_success_median']} reach={row['samples_to_threshold_median']}"
        )
    print(f"summary -> {root / 'summary.csv'}")
    return EXIT_RUN_FAILED if any(r["failures"] for r in rows) else EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
