#!/usr/bin/env python3
"""Run one episode and render its trajectory/polytope SVGs."""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from scenplan.cli import main as cli_main

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=None)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", default="out/episode")
    args = ap.parse_args()

    code = cli_main(["simulate", "--seed", str(args.seed), "--out", args.out]
                    + (["--config", args.config] if args.config else []))
    if code != 0:
        sys.exit(code)
    sys.exit(cli_main(["replay", "--trace", f"{args.out}/ep_{args.seed:05d}.csv",
                       "--out", args.out]))
