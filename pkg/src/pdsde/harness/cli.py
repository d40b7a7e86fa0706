"""``pdm`` command-line entry point.

Exit codes: 0 success, 2 config error, 3 infeasible configuration,
4 acceptance-threshold failure under ``--check``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..euler import CapExceeded
from ..models import ModelError
from .config import ConfigError, load_config
from .studies import EXPERIMENTS, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_CHECK = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdm", description="Euler-scheme and Malliavin Monte Carlo experiments")
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="SUBCOMMAND")
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run a {name} experiment")
        p.add_argument("--config", required=True, type=Path, help="JSON experiment config")
        p.add_argument("--check", action="store_true", help="exit 4 if configured acceptance thresholds fail")
        p.add_argument("--workers", type=int, default=None, help="worker threads (results do not depend on it)")
        p.add_argument("--out", type=Path, default=None, help="output directory (default: config output_dir or runs/<subcommand>)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if cfg["experiment"] != args.experiment:
            raise ConfigError(f"config describes a {cfg['experiment']!r} experiment, not {args.experiment!r}")
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be positive")
        bundle = run_experiment(cfg, workers=args.workers)
    except (ConfigError, ModelError) as exc:
        print(f"pdm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapExceeded as exc:
        print(f"pdm: infeasible configuration: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    out = args.out or Path(cfg.get("output_dir", Path("runs") / args.experiment))
    bundle.write(out)
    print(json.dumps({"out": str(out), "config_hash": bundle.summary["config_hash"], "checks": bundle.checks}))
    if args.check and not bundle.passed:
        failed = sorted(k for k, v in bundle.checks.items() if not v)
        print(f"pdm: acceptance checks failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
