#!/usr/bin/env python3
"""Reproduce the crossing-scenario statistics table.

Runs the Gaussian 2/4/6-pedestrian sweep plus both truncated variants and
prints the aggregated rows.  Expect roughly an hour on a laptop with
--jobs 8; pass --seeds to subsample for a quick look.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from scenplan.cli import main as cli_main

REPO = Path(__file__).resolve().parent.parent


def run(argv):
    code = cli_main(argv)
    if code != 0:
        sys.exit(code)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--jobs", type=int, default=8)
    ap.add_argument("--seeds", type=int, default=None, help="override seed count")
    ap.add_argument("--out", default="out")
    args = ap.parse_args()

    extra = [] if args.seeds is None else ["--seeds", str(args.seeds)]
    run(["sweep", "--config", str(REPO / "configs/table1.yaml"),
         "--pedestrians", "2,4,6", "--jobs", str(args.jobs),
         "--out", f"{args.out}/table1", "--check", *extra])
    run(["sweep", "--config", str(REPO / "configs/truncated_radial.yaml"),
         "--pedestrians", "6", "--jobs", str(args.jobs),
         "--out", f"{args.out}/radial", *extra])
    run(["sweep", "--config", str(REPO / "configs/truncated_width.yaml"),
         "--pedestrians", "6", "--jobs", str(args.jobs),
         "--out", f"{args.out}/width", *extra])
