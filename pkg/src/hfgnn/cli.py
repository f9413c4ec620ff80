"""Command-line runner: ``hfgnn {run,suite,snapshot,validate}``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from hfgnn.config import ExperimentConfig, emit_config, parse_config
from hfgnn.errors import ConfigError
from hfgnn.harness import cmd_run, cmd_snapshot, cmd_suite

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _parse_rounds(text: str) -> range:
    """``7`` or ``3:10`` (inclusive)."""
    try:
        if ":" in text:
            lo, hi = (int(x) for x in text.split(":", 1))
        else:
            lo = hi = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad round range {text!r}; use N or A:B") from None
    if lo < 1 or hi < lo:
        raise argparse.ArgumentTypeError(f"bad round range {text!r}")
    return range(lo, hi + 1)


def _load(args: argparse.Namespace) -> ExperimentConfig:
    cfg = parse_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.reps is not None:
        overrides["repetitions"] = args.reps
    if overrides:
        cfg = replace(cfg, **overrides)
        cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hfgnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, help="override the root seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--reps", type=int, help="override the number of repetitions")

    experiment_flags(sub.add_parser("run", help="run one strategy for every repetition"))
    experiment_flags(sub.add_parser("suite", help="all strategies x client counts comparison table"))
    p_val = sub.add_parser("validate", help="check a config and print it fully resolved")
    experiment_flags(p_val)

    p_snap = sub.add_parser("snapshot", help="per-round flow snapshots from a flow CSV")
    p_snap.add_argument("--flows", required=True, help="flow CSV written by 'run'")
    p_snap.add_argument("--rounds", type=_parse_rounds, help="round N or range A:B (default: all)")
    p_snap.add_argument("--out", required=True, help="directory for snapshot_<t>.txt files")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        if args.command == "snapshot":
            if not Path(args.flows).is_file():
                raise ConfigError(f"flow CSV not found: {args.flows}")
            paths = cmd_snapshot(args.flows, args.rounds, args.out)
            print(f"wrote {len(paths)} snapshots to {args.out}")
            return EXIT_OK
        cfg = _load(args)
        if args.command == "validate":
            sys.stdout.write(emit_config(cfg))
        elif args.command == "run":
            print(cmd_run(cfg))
        elif args.command == "suite":
            sys.stdout.write(cmd_suite(cfg).to_text())
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any component failure maps to exit 2
        logging.getLogger(__name__).debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
