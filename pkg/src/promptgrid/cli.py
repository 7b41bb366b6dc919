"""Command-line entry point.

Usage::

    promptgrid all --config configs/desk-seg.cfg --out runs/seg0
    promptgrid stage2 --config runs/seg0/config_resolved.cfg
    promptgrid eval --config ... --mode ensemble
    promptgrid ablation --config ...   # five-row component table
    promptgrid compare --config ...    # per-arrangement grid
"""

from __future__ import annotations

import argparse
import sys

from .config import ABLATIONS, MODES, ConfigError, load_config
from .pipeline import PipelineError, run

SUBCOMMANDS = ("pretrain", "stage1", "stage2", "stage3", "eval", "report",
               "all", "ablation", "compare")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptgrid",
        description="Grid-prompt visual in-context learning pipeline")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", metavar="PATH",
                        help="flat key=value config file")
    parser.add_argument("--seed", type=int, metavar="INT",
                        help="override run.seed")
    parser.add_argument("--out", metavar="DIR", help="override run.out")
    parser.add_argument("--mode", choices=MODES, help="override run.mode")
    parser.add_argument("--ablate", metavar="NAME", dest="ablate",
                        choices=[a for a in ABLATIONS if a != "none"],
                        help="enable one ablation switch "
                             "(fusion=mean | reuse=off | residual=off | layers=1)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides: dict[str, str] = {}
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.out is not None:
        overrides["run.out"] = args.out
    if args.mode is not None:
        overrides["run.mode"] = args.mode
    if args.ablate is not None:
        overrides["run.ablation"] = args.ablate
    try:
        cfg = load_config(args.config, overrides)
        return run(args.subcommand, cfg)
    except (ConfigError, PipelineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
