import csv
import json

import numpy as np
import pytest

from bayesfeed.cli import main
from bayesfeed.errors import ConfigError, EmptyGrid
from bayesfeed.runner import (
    METRIC_COLUMNS,
    StudyConfig,
    emit_outputs,
    enumerate_scenarios,
    load_config,
    requested_tags,
    run_study,
    study_exit_code,
)


def test_full_grid_size():
    scen = enumerate_scenarios(StudyConfig())
    assert len(scen) == 108
    assert len({s.scenario_id for s in scen}) == 108
    assert [s.seed for s in scen] == [s.seed for s in enumerate_scenarios(StudyConfig())]
    assert [s.seed for s in scen] != [s.seed for s in enumerate_scenarios(StudyConfig(seed=1))]


def test_single_scenario_and_empty_grid():
    cfg = StudyConfig(shapes=("a",), ranges=(0.5,), sigmas=(0.5,), sample_sizes=(60,), replicas=1)
    assert len(enumerate_scenarios(cfg)) == 1
    with pytest.raises(EmptyGrid):
        enumerate_scenarios(StudyConfig(shapes=()))
    with pytest.raises(EmptyGrid):
        enumerate_scenarios(StudyConfig(replicas=0))


def test_config_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("shapes: [c]\nsample_sizes: [30]\nmesh_n: 9\n")
    cfg = load_config(p, "smoke", seed=7)
    assert cfg.shapes == ("c",) and cfg.sample_sizes == (30,) and cfg.seed == 7
    assert cfg.protocols == ("moments",)
    p.write_text("bogus_key: 1\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        StudyConfig(shapes=("z",))
    round_trip = StudyConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert round_trip == cfg


def test_cli_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("families: [XX]\n")
    assert main(["run-study", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert main(["report", "--out", str(tmp_path / "missing")]) == 1
    assert main(["run-study", "--config", str(tmp_path / "nope.yaml")]) == 1


def test_requested_tags():
    cfg = StudyConfig()
    tags = requested_tags(cfg)
    assert len(tags) == 12 and "PM-PC-feedback_full" in tags


def test_empty_results_give_header_only(tmp_path):
    cfg = StudyConfig(out=str(tmp_path))
    emit_outputs([], cfg)
    for name in ("metrics.csv", "summary.csv", "improvement.csv", "errors.csv", "timings.csv"):
        lines = (tmp_path / name).read_text().splitlines()
        assert len(lines) == 1
    assert (tmp_path / "metrics.csv").read_text().strip() == ",".join(METRIC_COLUMNS)


TINY = dict(
    shapes=("a",),
    ranges=(0.4,),
    sigmas=(0.5,),
    sample_sizes=(30,),
    replicas=1,
    grid_n=20,
    mesh_n=8,
    mesh_extension=0.15,
    sim_mesh_n=15,
    protocols=("moments", "full-hyper"),
    heatmap_tags=("IM-PC-base",),
)


@pytest.fixture(scope="module")
def tiny_study(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    cfg = StudyConfig(out=str(out), seed=3, **TINY)
    results = run_study(cfg)
    emit_outputs(results, cfg)
    return cfg, results, out


def test_tiny_study_accounts_for_every_fit(tiny_study):
    cfg, results, out = tiny_study
    (res,) = results
    assert set(res.records) == set(requested_tags(cfg))
    n_ok = sum(r.ok for r in res.records.values())
    assert len(res.metrics) == 2 * n_ok
    errors = list(csv.DictReader(open(out / "errors.csv")))
    assert len(errors) == len(res.failed)
    assert study_exit_code(results) == (2 if res.failed else 0)
    assert n_ok >= 8


def test_tiny_study_files(tiny_study):
    cfg, results, out = tiny_study
    sid = results[0].scenario.scenario_id
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert rows and all(float(r["rmse"]) >= abs(float(r["bias"])) for r in rows)
    summary = list(csv.DictReader(open(out / "summary.csv")))
    assert {(r["model"], r["prior"]) for r in summary} == {("IM", "EN"), ("IM", "PC"), ("PM", "EN"), ("PM", "PC")}
    d = out / "rasters" / sid
    assert (d / "truth.csv").exists() and (d / "IM-PC-base_prediction.svg").read_text().startswith("<svg")
    assert len((d / "predictions.csv").read_text().splitlines()) == 401
    curves = {}
    for r in csv.DictReader(open(out / "densities" / f"{sid}.csv")):
        curves.setdefault((r["target"], r["parameter"], r["curve"]), []).append((float(r["value"]), float(r["density"])))
    assert curves
    for pts in curves.values():
        v, dens = np.array(pts).T
        assert np.trapezoid(dens, v) == pytest.approx(1.0, abs=1e-2)
    fit_doc = json.loads((out / "fits" / sid / "IM-PC-base.json").read_text())
    assert "beta1" in fit_doc["fit"]["fixed_effects"]


def test_tiny_study_deterministic(tiny_study, tmp_path):
    cfg, _, out = tiny_study
    again = StudyConfig(out=str(tmp_path), seed=3, **TINY)
    emit_outputs(run_study(again), again)
    assert (tmp_path / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()


def test_cli_simulate_fit_feedback(tmp_path, capsys):
    common = ["--out", str(tmp_path), "--seed", "5"]
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("grid_n: 20\nmesh_n: 8\nsim_mesh_n: 15\n")
    assert main(["simulate", "--config", str(cfg), "--n-s", "30"] + common) == 0
    assert main(["fit", "--config", str(cfg), "--sample", str(tmp_path / "sample_preferential.csv"), "--model", "PM",
                 "--raster", str(tmp_path / "truth.csv")] + common) == 0
    assert (tmp_path / "prediction.csv").exists()
    assert main(["feedback", "--config", str(cfg), "--source", str(tmp_path / "fit.json"), "--target-model", "IM"] + common) == 0
    priors = json.loads((tmp_path / "priors.json").read_text())
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert priors["variant"] == "IM"
    assert priors["means"]["beta1"] == pytest.approx(fit["fit"]["fixed_effects"]["beta1"]["mean"])
    assert main(["feedback", "--config", str(cfg), "--source", str(tmp_path / "fit.json"), "--target-model", "PM"] + common) == 2


def test_worker_pool_matches_serial(tmp_path):
    # runs after numba-backed fits in this session, the setting where a forked pool hung
    base = {**TINY, "protocols": ("moments",), "replicas": 2}
    out = {}
    for w in (1, 2):
        cfg = StudyConfig(out=str(tmp_path / f"w{w}"), seed=4, workers=w, **base)
        emit_outputs(run_study(cfg), cfg)
        out[w] = (tmp_path / f"w{w}" / "metrics.csv").read_bytes()
    assert out[1] == out[2]
