"""Run the one-scenario smoke study and print its summary table."""

from __future__ import annotations

import argparse
import sys

from bayesfeed.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/smoke")
    ap.add_argument("--seed", default="42")
    args = ap.parse_args()
    code = main(["run-study", "--grid", "smoke", "--seed", args.seed, "--out", args.out])
    if code in (0, 2):
        main(["report", "--out", args.out])
    sys.exit(code)
