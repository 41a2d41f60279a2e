"""Command line entry point: fiberfield <mode> --config <path> [--out <dir>] [--seed <int>]."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import FiberFieldError
from .harness import MODES, parse_config, run


def main(argv=None):
    parser = argparse.ArgumentParser(prog="fiberfield", description="multi-scale fiber lay-down simulations")
    parser.add_argument("mode", choices=MODES, help="pipeline to run")
    parser.add_argument("--config", required=True, help="path to the JSON experiment config")
    parser.add_argument("--out", default=None, help="output directory (overrides the config)")
    parser.add_argument("--seed", type=int, default=None, help="seed override")
    args = parser.parse_args(argv)

    try:
        cfg = parse_config(Path(args.config).read_text())
        if cfg.mode != args.mode:
            raise FiberFieldError(f"config declares mode '{cfg.mode}' but '{args.mode}' was requested")
        out = run(cfg, out_dir=args.out, seed=args.seed)
    except FiberFieldError as e:
        print(f"fiberfield: error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"fiberfield: error: {e}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
