"""Command line entry point: ``d2t collect|train-dm|pretrain-dt|finetune|eval|run``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from .pipeline.config import STAGES, VARIANTS, ConfigError, load_config
from .pipeline.stages import STAGE_FUNCS, MissingArtifactError, cmd_eval, run_all

log = logging.getLogger("d2t")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment configuration (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="experiment seed; overrides the config file")
    common.add_argument("--out", help="output root; overrides the config file")
    common.add_argument("--dry-run", action="store_true", help="validate the configuration and stop")
    common.add_argument("--explain", action="store_true", help="print the fully resolved configuration")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="d2t", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, parents=[common])
        if stage == "eval":
            p.add_argument("--variant", required=True, choices=VARIANTS)
    sub.add_parser("run", parents=[common], help="every stage enabled under `stages:` in order")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        config = load_config(args.config, seed=args.seed, out=args.out)
    except (ConfigError, OSError) as exc:
        print(f"d2t: configuration error: {exc}", file=sys.stderr)
        return 2
    if args.explain:
        print(config.explain(), end="")
    if args.dry_run:
        target = config.stage_dir(args.command) if args.command in STAGES else config.out
        print(f"configuration OK; outputs would go to {target}")
        return 0
    try:
        if args.command == "run":
            manifest = run_all(config)
        elif args.command == "eval":
            manifest = cmd_eval(config, args.variant)
        else:
            manifest = STAGE_FUNCS[args.command](config)
    except MissingArtifactError as exc:
        print(f"d2t: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
