"""Command line entry point: ``bayesfeed <simulate|fit|feedback|run-study|report>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import BayesFeedError, ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="YAML or JSON study configuration")
    p.add_argument("--seed", type=int, default=None, help="master seed (unsigned 64-bit)")
    p.add_argument("--workers", type=int, default=None, help="parallel scenario workers")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--grid", choices=("full", "smoke"), default="full")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bayesfeed", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a truth raster and both samples")
    _common(p)
    p.add_argument("--shape", default="a")
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--n-s", type=int, default=60)

    p = sub.add_parser("fit", help="fit IM, PM or PP to a sample CSV")
    _common(p)
    p.add_argument("--sample", type=Path, required=True)
    p.add_argument("--shape", default="a", help="covariate shape used for the sample")
    p.add_argument("--model", choices=("IM", "PM", "PP"), default="IM")
    p.add_argument("--prior", choices=("EN", "PC"), default="PC")
    p.add_argument("--priors", type=Path, default=None, help="prior set JSON (overrides --prior)")
    p.add_argument("--raster", type=Path, default=None, help="truth raster CSV to predict on")

    p = sub.add_parser("feedback", help="update a prior set from a fitted model")
    _common(p)
    p.add_argument("--source", type=Path, required=True, help="fit JSON written by 'fit'")
    p.add_argument("--target-model", choices=("IM", "PM"), required=True)
    p.add_argument("--target-priors", type=Path, default=None)
    p.add_argument("--prior", choices=("EN", "PC"), default="PC")
    p.add_argument("--protocol", choices=("moments", "full-hyper"), default="moments")
    p.add_argument("--include-phi", action="store_true")

    p = sub.add_parser("run-study", help="run the scenario grid")
    _common(p)

    p = sub.add_parser("report", help="recompute summary tables from metrics.csv")
    _common(p)
    return ap


def _config(args):
    from .runner import load_config

    return load_config(args.config, args.grid, seed=args.seed, workers=args.workers, out=str(args.out) if args.out else None)


def cmd_simulate(args) -> int:
    from .simulate import auto_preferentiality, sample_independent, sample_preferential, simulate_truth
    from .simulate import write_raster_csv, write_sample_csv
    from .runner import _seeds

    cfg = _config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t_seed, i_seed, p_seed = _seeds(cfg.seed)
    truth = simulate_truth(args.shape, args.rho, args.sigma, cfg.beta0, cfg.beta1, cfg.phi_true, cfg.grid_n, t_seed, cfg.sim_mesh_n, cfg.sim_extension)
    r = auto_preferentiality(truth, args.n_s, cfg.r0) if cfg.r_policy == "auto" else cfg.r0
    write_raster_csv(truth, out / "truth.csv")
    write_sample_csv(sample_independent(truth, args.n_s, i_seed), truth, out / "sample_independent.csv")
    write_sample_csv(sample_preferential(truth, args.n_s, r, p_seed, cfg.max_sample_fraction), truth, out / "sample_preferential.csv")
    print(f"wrote {out}/truth.csv and both samples (r={r:g})")
    return EXIT_OK


def cmd_fit(args) -> int:
    from .infer import fit_im, fit_pm, fit_pp
    from .mesh import assemble_fem, build_regular_mesh
    from .priors import base_priors, prior_set_from_dict, prior_set_to_dict
    from .runner import _jsonable
    from .simulate import read_raster_csv, read_sample_csv

    cfg = _config(args)
    sample = read_sample_csv(args.sample, args.shape)
    mesh = build_regular_mesh(cfg.mesh_n, cfg.mesh_n, cfg.mesh_extension)
    fem = assemble_fem(mesh)
    if args.priors:
        priors = prior_set_from_dict(json.loads(args.priors.read_text()))
    else:
        priors = base_priors(args.model, args.prior)
    if priors.variant != args.model:
        raise ConfigError(f"prior set is for {priors.variant}, model is {args.model}")
    raster = read_raster_csv(args.raster) if args.raster else None
    if args.model == "PP":
        fit = fit_pp(sample, mesh, priors, fem)
    else:
        fn = fit_im if args.model == "IM" else fit_pm
        fit = fn(sample, mesh, priors, fem, predict_at=(raster.centers, raster.covariate) if raster else None)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"fit": fit.to_dict(), "priors": prior_set_to_dict(priors)}
    (out / "fit.json").write_text(json.dumps(_jsonable(doc), indent=1, sort_keys=True) + "\n")
    if raster is not None and fit.prediction is not None:
        import csv

        with open(out / "prediction.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell_id", "y", "pred_mean", "pred_median", "eta_mean", "eta_sd"])
            p = fit.prediction
            for i in range(raster.n_cells):
                w.writerow([i, repr(float(raster.y[i]))] + [repr(float(a[i])) for a in (p.mean, p.median, p.eta_mean, p.eta_sd)])
    for name in fit.fixed_names:
        s = fit.summary(name)
        print(f"{name:8s} mean {s['mean']: .4f}  sd {s['sd']:.4f}  95% [{s['q025']: .4f}, {s['q975']: .4f}]")
    for name, m in fit.hyper.items():
        print(f"{name:8s} mean {m.mean: .4f}  sd {m.sd:.4f}  median {m.median: .4f}")
    return EXIT_OK


def cmd_feedback(args) -> int:
    from .feedback import FeedbackPolicy, apply_policy
    from .infer import FitResult
    from .priors import base_priors, prior_set_from_dict, prior_set_to_dict

    cfg = _config(args)
    doc = json.loads(args.source.read_text())
    source = FitResult.from_dict(doc["fit"])
    if args.target_priors:
        target = prior_set_from_dict(json.loads(args.target_priors.read_text()))
    else:
        target = base_priors(args.target_model, args.prior)
    policy = FeedbackPolicy(f"{source.variant}->{args.target_model}", args.protocol, include_phi=args.include_phi)
    updated = apply_policy(source, target, policy)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "priors.json").write_text(json.dumps(prior_set_to_dict(updated), indent=1, sort_keys=True) + "\n")
    print(f"wrote {out}/priors.json ({policy.direction}, {policy.protocol})")
    return EXIT_OK


def cmd_run_study(args) -> int:
    from .runner import emit_outputs, enumerate_scenarios, run_study, study_exit_code

    cfg = _config(args)
    scenarios = enumerate_scenarios(cfg)
    logging.getLogger(__name__).info("running %d scenarios on %d workers", len(scenarios), cfg.workers)
    results = run_study(cfg, scenarios)
    out = emit_outputs(results, cfg)
    n_fail = sum(len(r.failed) for r in results)
    n_req = sum(len(r.requested) for r in results)
    print(f"{len(results)} scenarios, {n_req - n_fail}/{n_req} fits succeeded; outputs in {out}")
    return study_exit_code(results)


def cmd_report(args) -> int:
    from .runner import read_metrics, write_report

    cfg = _config(args)
    out = Path(cfg.out)
    metrics = out / "metrics.csv"
    if not metrics.exists():
        raise ConfigError(f"{metrics} not found")
    write_report(read_metrics(metrics), out)
    print((out / "summary.csv").read_text(), end="")
    print((out / "improvement.csv").read_text(), end="")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "feedback": cmd_feedback,
    "run-study": cmd_run_study,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BayesFeedError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
