"""``lsplab`` command line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .pipeline import STAGES, ExperimentConfig, IncompleteRunError, Pipeline, StageError, minimal_config

COMMANDS = {
    "gen-data": "generate or ingest the train/test/defense datasets",
    "train-zoo": "train the benign and baseline-backdoored model zoos",
    "pilot-defense": "run NC on the pilot models (target classes only)",
    "plan-ar": "compute the compensatory bound and choose attack rates",
    "train-lsp": "train the LSP zoo at the planned attack rates",
    "defend": "run the configured defenses on every zoo model",
    "evaluate": "BA / ASR / ReASR per model, calibrated detection ACC / AP",
    "report": "write summary, norm-matrix and sweep tables",
    "sweep": "attack-rate sweep (ReASR and target norm per attack rate)",
    "run": "every stage, plus the sweep when configured",
    "show-config": "print the effective config as JSON",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out-dir", type=Path, default=Path("lsplab-out"))
    common.add_argument("--jobs", type=int, default=1, help="worker processes for training/defense")
    common.add_argument("--minimal", action="store_true", help="use the tiny built-in config")
    common.add_argument("--force", action="store_true", help="rerun the named stage even if up to date")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="lsplab", description="Label-smoothing poisoning lab", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        sub.add_parser(name, help=help_text, parents=[common])
    return parser


def load_config(args) -> ExperimentConfig:
    if args.config is not None and args.minimal:
        raise ValueError("--config and --minimal are mutually exclusive")
    if args.config is not None:
        cfg = ExperimentConfig.load(args.config)
    elif args.minimal:
        cfg = minimal_config()
    else:
        saved = args.out_dir / "config.json"
        cfg = ExperimentConfig.load(saved) if saved.exists() else ExperimentConfig()
    if args.seed is not None:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    if args.command == "show-config":
        print(json.dumps(cfg.to_dict(), indent=2))
        return 0

    pipe = Pipeline(cfg, args.out_dir, args.jobs)
    try:
        if args.command == "run":
            pipe.run("report")
        elif args.command == "sweep":
            pipe.run("sweep")
        else:
            idx = STAGES.index(args.command)
            for stage in STAGES[:idx]:
                pipe.run_stage(stage)
            pipe.run_stage(args.command, force=args.force)
    except StageError as exc:
        print(f"error: stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return 1
    except IncompleteRunError as exc:
        print(f"error: report: {exc}", file=sys.stderr)
        return 1
    for w in _plan_warnings(pipe):
        print(f"warning: {w}", file=sys.stderr)
    print(args.out_dir)
    return 0


def _plan_warnings(pipe: Pipeline):
    plan = pipe.out / "plan.json"
    if not plan.exists():
        return []
    return json.loads(plan.read_text()).get("warnings", [])


if __name__ == "__main__":
    sys.exit(main())
