"""Command-line entry point: one subcommand per pipeline stage plus
``pipeline`` for a full run."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

import numpy as np

from .config import ExperimentConfig, load_config
from .microlm import ConfigError, DivergenceError
from .pipeline import STAGES, DependencyError, ReportError, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="experiment config JSON (defaults if omitted)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--stages", help="comma-separated stage list (pipeline only)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads; results do not depend on this")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lesionlm",
                                     description="Lesion a small multilingual LM and measure "
                                                 "the effect on synthetic brain encoding.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()
    sub.add_parser("pipeline", parents=[common], help="run all (or --stages) stages")
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    return parser


def make_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed,
                                  model=dataclasses.replace(cfg.model, seed=args.seed))
    if args.out:
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = make_config(args)
        if args.command == "pipeline":
            stages = args.stages
        else:
            if args.stages:
                raise ConfigError("--stages only applies to the pipeline command")
            stages = [args.command]
        manifest = run_pipeline(cfg, stages, threads=args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DependencyError, ReportError) as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (DivergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    done = [s for s in STAGES if manifest.is_done(s)]
    print(f"{cfg.output_dir}: complete stages {', '.join(done) or 'none'}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
