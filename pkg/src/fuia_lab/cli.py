"""``fuia-lab`` command line.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError, FuiaError, StageError
from .pipeline import run_pipeline, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
COMMANDS = ("train", "unlearn", "attack", "report", "pipeline")

log = logging.getLogger("fuia_lab")


def build_parser() -> argparse.ArgumentParser:
    # argparse exits with 2 on usage errors, the same code as a bad config.
    parser = argparse.ArgumentParser(prog="fuia-lab", description="Federated unlearning inversion attack lab.")
    parser.add_argument("command", choices=COMMANDS, help="stage to run, or 'pipeline' for all of them")
    parser.add_argument("--config", required=True, help="experiment config (sectioned key=value or JSON)")
    parser.add_argument("--seed", type=int, default=None, help="override [experiment] seed")
    parser.add_argument("--out", default=None, help="override [experiment] out directory")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, out=args.out)
    except ConfigError as exc:
        print(f"fuia-lab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "pipeline":
            out = run_pipeline(cfg)
            print((out / "summary.txt").read_text(), end="")
            print(f"metrics: {out / 'metrics.csv'}")
        else:
            paths = run_stage(cfg, args.command)
            if args.command == "report":
                print((paths[0] / "summary.txt").read_text(), end="")
                print(f"metrics: {paths[0] / 'metrics.csv'}")
            else:
                for p in paths:
                    log.info("wrote %s", p)
                print(f"{args.command}: {len(paths)} trial(s) under {cfg.experiment.out}")
    except StageError as exc:
        print(f"fuia-lab: stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except ConfigError as exc:
        print(f"fuia-lab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FuiaError, OSError, ValueError) as exc:
        print(f"fuia-lab: stage failure ({args.command}): {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
