"""Scenario grid, per-scenario pipeline and study outputs.

Per scenario: simulate a truth raster, draw an independent and a
preferential sample, fit IM (independent sample) and PM (preferential
sample) under each prior family, feed each base posterior into the other
model's priors, refit, predict on the raster and score the predictions.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import multiprocessing
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .errors import BayesFeedError, ConfigError, EmptyGrid, InsufficientSupport
from .evaluate import METRIC_COLUMNS, MetricRow, bias, improvement_proportion, rmse
from .feedback import FeedbackPolicy, alpha_propagation, apply_policy
from .infer import FitResult, fit_im, fit_pm, fit_pp
from .mesh import assemble_fem, build_regular_mesh
from .priors import base_priors, prior_set_to_dict, spatial_marginal_pdf
from .simulate import (
    SHAPES,
    auto_preferentiality,
    sample_independent,
    sample_preferential,
    simulate_truth,
    write_raster_csv,
    write_sample_csv,
)
from .svg import write_heatmap

log = logging.getLogger(__name__)

FAMILIES = ("EN", "PC")
MODELS = ("IM", "PM")
PREDICTORS = ("mean", "median")
STAGE_FOR_PROTOCOL = {"moments": "feedback", "full-hyper": "feedback_full"}
STAGES = ("base", "feedback", "feedback_full")
COMPARISONS = (
    ("PM-EN-feedback", "PM-EN-base"),
    ("PM-PC-feedback", "PM-PC-base"),
    ("PM-EN-feedback", "IM-EN-base"),
    ("PM-PC-feedback", "IM-PC-base"),
    ("IM-EN-feedback", "IM-EN-base"),
    ("IM-PC-feedback", "IM-PC-base"),
)


@dataclass
class StudyConfig:
    shapes: tuple = ("a", "b", "c")
    ranges: tuple = (0.2, 0.5, 0.8)
    sigmas: tuple = (0.5, 1.5)
    sample_sizes: tuple = (60, 120, 180)
    replicas: int = 2
    seed: int = 0
    grid_n: int = 50
    mesh_n: int = 21
    mesh_extension: float = 0.2
    sim_mesh_n: int = 41
    sim_extension: float = 0.3
    families: tuple = FAMILIES
    protocols: tuple = ("moments", "full-hyper")
    r0: float = 2.0
    r_policy: str = "auto"
    phi_true: float = 15.0
    beta0: float = -1.0
    beta1: float = 1.0
    max_sample_fraction: float = 0.1
    include_phi: bool = False
    include_alpha_propagation: bool = False
    heatmap_tags: tuple = ("IM-PC-base", "PM-PC-base", "PM-PC-feedback")
    out: str = "results"
    workers: int = 1

    def __post_init__(self):
        for name in ("shapes", "ranges", "sigmas", "sample_sizes", "families", "protocols", "heatmap_tags"):
            setattr(self, name, tuple(getattr(self, name)))
        self.ranges = tuple(float(v) for v in self.ranges)
        self.sigmas = tuple(float(v) for v in self.sigmas)
        self.sample_sizes = tuple(int(v) for v in self.sample_sizes)
        self.validate()

    def validate(self) -> None:
        if any(s not in SHAPES for s in self.shapes):
            raise ConfigError(f"shapes must be drawn from {SHAPES}, got {self.shapes}")
        if any(f not in FAMILIES for f in self.families):
            raise ConfigError(f"families must be drawn from {FAMILIES}, got {self.families}")
        if any(p not in STAGE_FOR_PROTOCOL for p in self.protocols):
            raise ConfigError(f"protocols must be drawn from {tuple(STAGE_FOR_PROTOCOL)}, got {self.protocols}")
        if any(r <= 0 for r in self.ranges) or any(s <= 0 for s in self.sigmas):
            raise ConfigError("ranges and sigmas must be positive")
        if any(n < 1 for n in self.sample_sizes):
            raise ConfigError("sample sizes must be positive")
        if self.replicas < 0 or self.workers < 1:
            raise ConfigError("replicas must be nonnegative and workers positive")
        if self.r_policy not in ("auto", "fixed"):
            raise ConfigError(f"r_policy must be 'auto' or 'fixed', got {self.r_policy!r}")
        if self.grid_n < 10 or self.mesh_n < 2:
            raise ConfigError("grid_n must be at least 10 and mesh_n at least 2")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


GRID_PRESETS = {
    "full": {},
    "smoke": {
        "shapes": ("a",),
        "ranges": (0.5,),
        "sigmas": (0.5,),
        "sample_sizes": (60,),
        "replicas": 1,
        "protocols": ("moments",),
    },
}


def load_config(path=None, grid: str = "full", **overrides) -> StudyConfig:
    """Preset for ``grid``, then values from the file at ``path``, then ``overrides``."""
    import yaml

    if grid not in GRID_PRESETS:
        raise ConfigError(f"unknown grid {grid!r}; expected one of {tuple(GRID_PRESETS)}")
    d = dict(GRID_PRESETS[grid])
    if path is not None:
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        d.update(loaded)
    d.update({k: v for k, v in overrides.items() if v is not None})
    return StudyConfig.from_dict(d)


# ---------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class Scenario:
    shape: str
    rho: float
    sigma: float
    n_s: int
    replica: int
    seed: int

    @property
    def scenario_id(self) -> str:
        return f"{self.shape}-r{self.rho:g}-s{self.sigma:g}-n{self.n_s}-k{self.replica}"


def stable_seed(master: int, descriptor: str) -> int:
    digest = hashlib.sha256(f"{int(master)}|{descriptor}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def enumerate_scenarios(config: StudyConfig) -> list[Scenario]:
    factors = (config.shapes, config.ranges, config.sigmas, config.sample_sizes, range(config.replicas))
    if any(len(f) == 0 for f in factors):
        raise EmptyGrid("every factor needs at least one level")
    out = []
    for shape, rho, sigma, n_s, k in product(*factors):
        s = Scenario(shape, rho, sigma, n_s, k, 0)
        out.append(dataclasses.replace(s, seed=stable_seed(config.seed, s.scenario_id)))
    return out


@dataclass
class FitRecord:
    tag: str
    fit: FitResult | None = None
    priors: object = None
    prediction: object = None
    error: str | None = None
    error_type: str | None = None
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class ScenarioResult:
    scenario: Scenario
    truth: object
    samples: dict
    r: float
    records: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)
    densities: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def failed(self) -> list:
        return [t for t, r in self.records.items() if not r.ok]

    @property
    def requested(self) -> list:
        return list(self.records)


def requested_tags(config: StudyConfig) -> list[str]:
    tags = [f"{m}-{f}-base" for m in MODELS for f in config.families]
    for proto in config.protocols:
        tags += [f"{m}-{f}-{STAGE_FOR_PROTOCOL[proto]}" for m in MODELS for f in config.families]
    return tags


def _seeds(seed: int):
    return [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(3)]


def _fit(model, sample, mesh, fem, priors, centers, covariate):
    fn = fit_im if model == "IM" else fit_pm
    return fn(sample, mesh, priors, fem, predict_at=(centers, covariate))


def _run_fit(tag, model, sample, mesh, fem, priors, truth) -> FitRecord:
    t0 = time.perf_counter()
    rec = FitRecord(tag, priors=priors)
    try:
        fit = _fit(model, sample, mesh, fem, priors, truth.centers, truth.covariate)
        rec.prediction = fit.prediction
        rec.fit = fit.compact()
    except Exception as exc:  # recorded per fit; the scenario carries on
        rec.error, rec.error_type = str(exc), type(exc).__name__
        log.warning("fit %s failed: %s", tag, exc)
        log.debug("%s", traceback.format_exc())
    rec.seconds = time.perf_counter() - t0
    return rec


def _density_rows(sid, target_tag, source: FitResult, priors, refit: FitResult | None):
    """Posterior-vs-updated-prior curves on a common grid, each normalized on the grid."""
    rows = []
    for name in ("rho", "sigma"):
        src = source.hyper[name]
        lo, hi = float(src.values[0]), float(src.values[-1])
        if refit is not None:
            lo, hi = min(lo, float(refit.hyper[name].values[0])), max(hi, float(refit.hyper[name].values[-1]))
        grid = np.linspace(lo, hi, 201)
        curves = {
            "source_posterior": np.interp(grid, src.values, src.density, left=0.0, right=0.0),
            "updated_prior": spatial_marginal_pdf(priors.spatial, name, grid),
        }
        if refit is not None:
            m = refit.hyper[name]
            curves["target_posterior"] = np.interp(grid, m.values, m.density, left=0.0, right=0.0)
        rows += _emit_curves(sid, target_tag, name, grid, curves)
    for name in ("beta0", "beta1"):
        s = source.summary(name)
        p = getattr(priors, name)
        grid = np.linspace(s["mean"] - 5 * s["sd"], s["mean"] + 5 * s["sd"], 201)
        curves = {
            "source_posterior": _normal_pdf(grid, s["mean"], s["sd"]),
            "updated_prior": _normal_pdf(grid, p.mean, p.sd),
        }
        if refit is not None:
            r = refit.summary(name)
            curves["target_posterior"] = _normal_pdf(grid, r["mean"], r["sd"])
        rows += _emit_curves(sid, target_tag, name, grid, curves)
    return rows


def _normal_pdf(x, m, s):
    return np.exp(-0.5 * ((x - m) / s) ** 2) / (s * math.sqrt(2 * math.pi))


def _emit_curves(sid, tag, name, grid, curves):
    rows = []
    for curve, dens in curves.items():
        dens = np.nan_to_num(np.asarray(dens, float))
        mass = np.trapezoid(dens, grid)
        if mass > 0:
            dens = dens / mass
        rows += [(sid, tag, name, curve, float(g), float(d)) for g, d in zip(grid, dens)]
    return rows


def run_scenario(s: Scenario, config: StudyConfig) -> ScenarioResult:
    t0 = time.perf_counter()
    truth_seed, ind_seed, pref_seed = _seeds(s.seed)
    truth = simulate_truth(
        s.shape,
        s.rho,
        s.sigma,
        beta0=config.beta0,
        beta1=config.beta1,
        phi=config.phi_true,
        grid_n=config.grid_n,
        seed=truth_seed,
        mesh_n=config.sim_mesh_n,
        extension=config.sim_extension,
    )
    r = auto_preferentiality(truth, s.n_s, config.r0) if config.r_policy == "auto" else config.r0
    samples = {
        "independent": sample_independent(truth, s.n_s, ind_seed),
        "preferential": sample_preferential(truth, s.n_s, r, pref_seed, max_fraction=config.max_sample_fraction),
    }
    data = {"IM": samples["independent"], "PM": samples["preferential"]}
    mesh = build_regular_mesh(config.mesh_n, config.mesh_n, config.mesh_extension)
    fem = assemble_fem(mesh)
    res = ScenarioResult(s, truth, samples, r)
    sid = s.scenario_id

    for model in MODELS:
        for fam in config.families:
            tag = f"{model}-{fam}-base"
            res.records[tag] = _run_fit(tag, model, data[model], mesh, fem, base_priors(model, fam), truth)

    pp_fits = {}
    for proto in config.protocols:
        stage = STAGE_FOR_PROTOCOL[proto]
        for target in MODELS:
            source_model = "PM" if target == "IM" else "IM"
            for fam in config.families:
                tag = f"{target}-{fam}-{stage}"
                src = res.records[f"{source_model}-{fam}-base"]
                if not src.ok:
                    res.records[tag] = FitRecord(tag, error=f"source fit failed: {src.error}", error_type="SourceFailed")
                    continue
                policy = FeedbackPolicy(
                    direction=f"{source_model}->{target}",
                    protocol=proto,
                    include_phi=config.include_phi,
                    include_alpha_propagation=config.include_alpha_propagation,
                )
                try:
                    priors = apply_policy(src.fit, base_priors(target, fam), policy)
                    if target == "PM" and policy.include_alpha_propagation:
                        if fam not in pp_fits:
                            pp_fits[fam] = fit_pp(data["PM"], mesh, base_priors("PP", fam), fem)
                        priors = priors.with_(alpha=alpha_propagation(pp_fits[fam], src.fit))
                except (BayesFeedError, InsufficientSupport) as exc:
                    res.records[tag] = FitRecord(tag, error=str(exc), error_type=type(exc).__name__)
                    continue
                rec = _run_fit(tag, target, data[target], mesh, fem, priors, truth)
                res.records[tag] = rec
                res.densities += _density_rows(sid, tag, src.fit, priors, rec.fit)

    for tag, rec in res.records.items():
        if not rec.ok:
            continue
        model, fam, stage = tag.split("-")
        for pred in PREDICTORS:
            res.metrics.append(
                MetricRow(sid, model, fam, stage, pred, rmse(rec.prediction, truth, pred), bias(rec.prediction, truth, pred))
            )
    res.seconds = time.perf_counter() - t0
    return res


def _run_one(args):
    s, config = args
    return run_scenario(s, config)


def run_study(config: StudyConfig, scenarios=None) -> list[ScenarioResult]:
    scenarios = enumerate_scenarios(config) if scenarios is None else scenarios
    if config.workers > 1 and len(scenarios) > 1:
        # spawn: forking a parent that already runs numba/BLAS threads can deadlock
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=config.workers, mp_context=ctx) as ex:
            results = list(ex.map(_run_one, [(s, config) for s in scenarios]))
    else:
        results = [run_scenario(s, config) for s in scenarios]
    return sorted(results, key=lambda r: r.scenario.scenario_id)


# ------------------------------------------------------------------ outputs


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


SUMMARY_COLUMNS = ["model", "prior", "stage", "predictor", "n", "median_rmse", "median_bias", "median_abs_bias"]
IMPROVEMENT_COLUMNS = ["better", "baseline", "predictor", "proportion", "n_scenarios"]
ERROR_COLUMNS = ["scenario_id", "tag", "error_type", "message"]
TIMING_COLUMNS = ["scenario_id", "tag", "seconds", "robustness_flag", "n_points", "newton_iterations_max"]
DENSITY_COLUMNS = ["scenario_id", "target", "parameter", "curve", "value", "density"]


def summarize(rows) -> list[list]:
    groups = {}
    for r in rows:
        groups.setdefault((r.model, r.prior, r.stage, r.predictor), []).append(r)
    out = []
    for model, fam, stage, pred in product(MODELS, FAMILIES, STAGES, PREDICTORS):
        g = groups.get((model, fam, stage, pred))
        if not g:
            continue
        b = np.array([r.bias for r in g])
        out.append(
            [model, fam, stage, pred, len(g), repr(float(np.median([r.rmse for r in g]))), repr(float(np.median(b))), repr(float(np.median(np.abs(b))))]
        )
    return out


def improvements(rows) -> list[list]:
    """Improvement proportions over the scenarios holding both tags of each comparison."""
    out = []
    for a, b in COMPARISONS:
        for pred in PREDICTORS:
            sel = [r for r in rows if r.predictor == pred and r.tag in (a, b)]
            tags = {}
            for r in sel:
                tags.setdefault(r.scenario_id, set()).add(r.tag)
            complete = [r for r in sel if tags[r.scenario_id] == {a, b}]
            if complete:
                n = len({r.scenario_id for r in complete})
                out.append([a, b, pred, repr(improvement_proportion(complete, (a, b), pred)), n])
    return out


def read_metrics(path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        return [
            MetricRow(r["scenario_id"], r["model"], r["prior"], r["stage"], r["predictor"], float(r["rmse"]), float(r["bias"]))
            for r in csv.DictReader(fh)
        ]


def write_report(rows, out: Path) -> None:
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summarize(rows))
    _write_csv(out / "improvement.csv", IMPROVEMENT_COLUMNS, improvements(rows))


def emit_outputs(results, config: StudyConfig, out=None) -> Path:
    out = Path(out or config.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for sub in ("densities", "rasters", "fits"):
            (out / sub).mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    with open(out / "config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    rows = [m for r in results for m in r.metrics]
    _write_csv(out / "metrics.csv", METRIC_COLUMNS, [m.as_list() for m in rows])
    write_report(rows, out)
    errors, timings = [], []
    for res in results:
        sid = res.scenario.scenario_id
        for tag, rec in res.records.items():
            if not rec.ok:
                errors.append([sid, tag, rec.error_type, rec.error])
            else:
                d = rec.fit.diagnostics
                timings.append([sid, tag, f"{rec.seconds:.3f}", int(bool(d.get("robustness_flag"))), d.get("n_points"), d.get("newton_iterations_max")])
        _write_csv(out / "densities" / f"{sid}.csv", DENSITY_COLUMNS, [[a, b, c, d, repr(e), repr(f)] for a, b, c, d, e, f in res.densities])
        _emit_rasters(res, config, out / "rasters" / sid)
        _emit_fits(res, out / "fits" / sid)
    _write_csv(out / "errors.csv", ERROR_COLUMNS, errors)
    _write_csv(out / "timings.csv", TIMING_COLUMNS, timings)
    return out


def _emit_rasters(res: ScenarioResult, config: StudyConfig, d: Path) -> None:
    d.mkdir(exist_ok=True)
    truth = res.truth
    write_raster_csv(truth, d / "truth.csv")
    for name, sample in res.samples.items():
        write_sample_csv(sample, truth, d / f"sample_{name}.csv")
    ok = [(t, r) for t, r in res.records.items() if r.ok]
    header = ["cell_id", "y"] + [f"{t}:{p}" for t, _ in ok for p in PREDICTORS]
    cols = [truth.y] + [rec.prediction.predictor(p) for _, rec in ok for p in PREDICTORS]
    body = [[i] + [repr(float(c[i])) for c in cols] for i in range(truth.n_cells)]
    _write_csv(d / "predictions.csv", header, body)
    g = truth.grid_n
    write_heatmap(d / "truth_y.svg", truth.y, g, "truth y")
    write_heatmap(d / "truth_mu.svg", truth.mu, g, "truth mu")
    for tag, rec in ok:
        if tag not in config.heatmap_tags:
            continue
        pred = rec.prediction.mean
        write_heatmap(d / f"{tag}_prediction.svg", pred, g, f"{tag} mean prediction")
        write_heatmap(d / f"{tag}_residual.svg", pred - truth.y, g, f"{tag} residual", diverging=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _emit_fits(res: ScenarioResult, d: Path) -> None:
    d.mkdir(exist_ok=True)
    for tag, rec in res.records.items():
        doc = {"tag": tag, "seconds": rec.seconds}
        if rec.priors is not None:
            doc["priors"] = prior_set_to_dict(rec.priors)
        if rec.ok:
            doc["fit"] = rec.fit.to_dict()
        else:
            doc["error"] = {"type": rec.error_type, "message": rec.error}
        with open(d / f"{tag}.json", "w") as fh:
            json.dump(_jsonable(doc), fh, indent=1, sort_keys=True)
            fh.write("\n")


def study_exit_code(results) -> int:
    return 2 if any(r.failed for r in results) else 0


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))
