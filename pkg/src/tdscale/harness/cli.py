"""``tdscale <preset> [--config FILE] [--seed N] [--out DIR]``"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, user_overrides
from .presets import PRESETS
from .runner import run_preset


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdscale", description="Run a TD-error scaling experiment preset.")
    p.add_argument("preset", choices=sorted(PRESETS))
    p.add_argument("--config", type=Path, help="YAML/JSON file of config overrides")
    p.add_argument("--seed", type=_seed, default=0, help="root seed (u64)")
    p.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = user_overrides(args.config) if args.config else {}
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        status = run_preset(args.preset, overrides, args.seed, args.out)
    except OSError as exc:
        print(f"cannot write results: {exc}", file=sys.stderr)
        return 2
    summary = json.loads((args.out / args.preset / "summary.json").read_text())
    for name, ok in summary["checks"].items():
        print(f"{'PASS' if ok else 'FAIL'} {args.preset}: {name}")
    return status


if __name__ == "__main__":
    sys.exit(main())
