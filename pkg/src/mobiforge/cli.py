"""Command-line entry point orchestrating the pipeline stages.

Exit codes: 0 success, 2 configuration error, 3 missing-dependency error,
4 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, config_hash, load_config
from .pipeline import (STAGES, DependencyError, StageError, Workspace,
                       run_e2e, run_stage)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_RUNTIME = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mobiforge",
        description="Cross-city mobility generation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="JSON run configuration (defaults used if omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override a config field, e.g. --set seeds.master=7")
        p.add_argument("--out", default=None,
                       help="workspace directory (overrides paths.out_dir)")
        p.add_argument("--force", action="store_true",
                       help="re-run even when outputs are up to date")
        return p

    for name in STAGES:
        add(name, f"run the {name} stage")
    add("e2e", "run the full synthetic workflow end to end")
    show = sub.add_parser("show-config", help="print the merged configuration")
    show.add_argument("--config", default=None)
    show.add_argument("--set", dest="overrides", action="append", default=[],
                      metavar="KEY=VALUE")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "show-config":
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return EXIT_OK

    ws = Workspace(args.out or cfg["paths"]["out_dir"])
    try:
        if args.command == "e2e":
            ran = run_e2e(ws, cfg, force=args.force)
            skipped = [s for s in
                       ("synth-data", "train-planner", "train-embed",
                        "train-gen", "generate", "evaluate", "audit")
                       if s not in ran]
            for s in ran:
                print(f"ran {s}")
            for s in skipped:
                print(f"skipped {s} (up to date)")
        else:
            if run_stage(args.command, ws, cfg, force=args.force):
                print(f"ran {args.command}")
            else:
                print(f"skipped {args.command} (up to date)")
        print(f"workspace: {ws.root}  config: {config_hash(cfg)}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DependencyError, StageError) as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except Exception as e:  # numeric failures, IO errors, model errors
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
