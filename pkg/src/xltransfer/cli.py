"""Command-line entry point.

Stage subcommands run the pipeline from ingestion up to and including the
named stage, so each leaves a complete, inspectable set of artifacts.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .runner import ConfigError, ExperimentConfig, Mode, StageError, UnreadableReport, report, run

STAGE_COMMANDS = {
    "ingest": ("ingest", None),
    "pseudo-label": ("pseudo-label", None),
    "align": ("align", None),
    "masquerade": ("masquerade", None),
    "build-prompts": ("build-prompts", None),
    "run-icl": (None, Mode.ICL),
    "emit-sft": (None, Mode.SFT_EMIT),
    "score": (None, Mode.SCORE),
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="out_dir", help="output directory")
    p.add_argument("--endpoint", help="completion endpoint URL or mock:project")
    p.add_argument("--allow-deviation", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xltransfer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        _common(sub.add_parser(name))
    rep = sub.add_parser("report", help="consolidate run manifests into one table")
    rep.add_argument("manifests", nargs="+")
    rep.add_argument("--out", dest="out_dir")
    return parser


def load_config(args: argparse.Namespace, mode=None) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(
        args.config,
        seed=args.seed,
        out_dir=args.out_dir,
        allow_deviation=args.allow_deviation,
        mode=mode.value if mode else None,
    )
    if args.endpoint:
        cfg.generation = {**cfg.generation, "endpoint": args.endpoint}
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        try:
            sys.stdout.write(report(args.manifests, args.out_dir))
        except UnreadableReport as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        return 0

    stop_after, mode = STAGE_COMMANDS[args.command]
    try:
        cfg = load_config(args, mode)
        manifest = run(cfg, stop_after=stop_after)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{args.command}: {manifest.status}, artifacts in {cfg.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
