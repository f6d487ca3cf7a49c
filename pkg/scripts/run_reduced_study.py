"""Twelve-scenario study (shapes a and c, three ranges, two field scales, n_s = 120)."""

from __future__ import annotations

import argparse
import csv
import time
from pathlib import Path

from bayesfeed.runner import StudyConfig, default_workers, emit_outputs, run_study, study_exit_code

REDUCED = dict(
    shapes=("a", "c"),
    ranges=(0.2, 0.5, 0.8),
    sigmas=(0.5, 1.5),
    sample_sizes=(120,),
    replicas=1,
    grid_n=30,
    mesh_n=21,
    protocols=("moments",),
    max_sample_fraction=0.15,  # 120 of 900 cells
)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/reduced")
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--workers", type=int, default=default_workers())
    ap.add_argument("--full-hyper", action="store_true", help="also run the tabulated-prior protocol")
    args = ap.parse_args()
    protocols = ("moments", "full-hyper") if args.full_hyper else ("moments",)
    cfg = StudyConfig(**{**REDUCED, "protocols": protocols}, seed=args.seed, workers=args.workers, out=args.out)
    t0 = time.perf_counter()
    results = run_study(cfg)
    out = emit_outputs(results, cfg)
    print(f"{len(results)} scenarios in {(time.perf_counter() - t0) / 60:.1f} min -> {out}")
    for row in csv.DictReader(open(Path(out) / "improvement.csv")):
        print(f"{row['better']:>16s} < {row['baseline']:<12s} {row['predictor']:6s} {float(row['proportion']):.0%} of {row['n_scenarios']}")
    raise SystemExit(study_exit_code(results))
