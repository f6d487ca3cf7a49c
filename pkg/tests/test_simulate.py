import numpy as np
import pytest
from scipy import stats

from bayesfeed.errors import InvalidHyperparameter, InvalidShape, PreferentialityTooHigh, SampleTooLarge
from bayesfeed.simulate import (
    TruthRaster,
    auto_preferentiality,
    cell_centers,
    covariate_field,
    first_draw_probabilities,
    read_raster_csv,
    read_sample_csv,
    sample_independent,
    sample_preferential,
    simulate_truth,
    write_raster_csv,
    write_sample_csv,
)


def toy_raster(y):
    y = np.asarray(y, float)
    n = len(y)
    centers = np.column_stack([(np.arange(n) + 0.5) / n, np.full(n, 0.5)])
    x = covariate_field("a", centers)
    return TruthRaster(10, centers, x, np.zeros(n), np.log(y), y, y, {"shape": "a"})


def test_covariate_examples():
    assert covariate_field("a", [[0.0, 0.5]])[0] == pytest.approx(0.5, abs=1e-12)
    assert covariate_field("b", [[0.5, 0.5]])[0] == pytest.approx(2.425, abs=1e-12)
    assert covariate_field("c", [[0.25, 0.25]])[0] == pytest.approx(2.2, abs=1e-12)
    with pytest.raises(InvalidShape):
        covariate_field("d", [[0.1, 0.1]])


def test_truth_invariants(truth_a):
    assert np.all(truth_a.y > 0)
    assert np.allclose(truth_a.mu, np.exp(truth_a.eta), rtol=1e-12)
    assert truth_a.cell_area * truth_a.n_cells == pytest.approx(1.0)
    assert np.allclose(truth_a.eta, -1 + truth_a.covariate + truth_a.u)


def test_truth_deterministic():
    a = simulate_truth("b", 0.3, 1.0, grid_n=12, seed=5, mesh_n=15)
    b = simulate_truth("b", 0.3, 1.0, grid_n=12, seed=5, mesh_n=15)
    c = simulate_truth("b", 0.3, 1.0, grid_n=12, seed=6, mesh_n=15)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.u, b.u)
    assert not np.array_equal(a.y, c.y)


def test_vanishing_field():
    t = simulate_truth("c", 0.5, 1e-6, grid_n=15, seed=2, mesh_n=15)
    assert np.max(np.abs(t.eta - (-1 + t.covariate))) < 1e-3


def test_gamma_moments():
    # shape phi, rate phi/mu: mu=2, phi=4 gives mean 2, variance 1
    rng = np.random.default_rng(0)
    draws = rng.gamma(shape=4.0, scale=2.0 / 4.0, size=400_000)
    assert draws.mean() == pytest.approx(2.0, abs=0.01)
    assert draws.var() == pytest.approx(1.0, abs=0.01)


def test_truth_gamma_law():
    t = simulate_truth("a", 0.5, 0.5, phi=15.0, grid_n=40, seed=3, mesh_n=21)
    ratio = t.y / t.mu
    assert ratio.mean() == pytest.approx(1.0, abs=0.02)
    assert ratio.var() == pytest.approx(1 / 15, rel=0.15)


def test_truth_validation():
    with pytest.raises(InvalidHyperparameter):
        simulate_truth("a", -0.5, 1.0, grid_n=10)
    with pytest.raises(InvalidHyperparameter):
        simulate_truth("a", 0.5, 1.0, grid_n=5)


def test_independent_sample(truth_a):
    s = sample_independent(truth_a, 30, 4)
    assert s.n == 30 and len(np.unique(s.cell_ids)) == 30
    assert np.array_equal(s.y, truth_a.y[s.cell_ids])
    assert np.array_equal(sample_independent(truth_a, 30, 4).cell_ids, s.cell_ids)
    full = sample_independent(truth_a, truth_a.n_cells, 1)
    assert np.array_equal(np.sort(full.cell_ids), np.arange(truth_a.n_cells))
    with pytest.raises(SampleTooLarge):
        sample_independent(truth_a, truth_a.n_cells + 1, 1)


def test_independent_uniform_frequencies():
    raster = toy_raster(np.arange(1, 11))
    counts = np.zeros(10)
    ss = np.random.SeedSequence(99).spawn(10_000)
    for s in ss:
        counts[sample_independent(raster, 3, s).cell_ids] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_softmax_example():
    p = first_draw_probabilities([1.0, 1.0, 2.0], 1.0)
    assert np.allclose(p, [0.2119, 0.2119, 0.5761], atol=5e-5)
    assert np.allclose(first_draw_probabilities([3.0] * 5, 4.0), 0.2)
    assert np.allclose(first_draw_probabilities([1.0, 5.0, 2.0], 0.0), 1 / 3)


def test_monotone_preference(rng):
    y = rng.gamma(2.0, 1.0, 50)
    p = first_draw_probabilities(y, 0.7)
    order = np.argsort(y)
    assert np.all(np.diff(p[order]) > 0)


def test_r_zero_matches_independent(truth_a):
    a = sample_preferential(truth_a, 20, 0.0, 8)
    b = sample_independent(truth_a, 20, 8)
    assert np.array_equal(a.cell_ids, b.cell_ids)


def test_preferential_raises_mean(truth_a):
    r = auto_preferentiality(truth_a, 20, 2.0)
    diffs = []
    for s in np.random.SeedSequence(3).spawn(1000):
        diffs.append(sample_preferential(truth_a, 20, r, s).y.mean() - truth_a.y.mean())
    diffs = np.array(diffs)
    assert stats.ttest_1samp(diffs, 0.0, alternative="greater").pvalue < 0.01


def test_preferential_errors(truth_a):
    with pytest.raises(SampleTooLarge):
        sample_preferential(truth_a, 60, 0.1, 1)
    with pytest.raises(PreferentialityTooHigh):
        sample_preferential(truth_a, 30, 50.0, 1)
    r = auto_preferentiality(truth_a, 30, 50.0)
    assert first_draw_probabilities(truth_a.y, r).max() * 30 <= 1.0
    sample_preferential(truth_a, 30, r, 1)


def test_csv_round_trip(tmp_path, truth_a):
    write_raster_csv(truth_a, tmp_path / "r.csv")
    back = read_raster_csv(tmp_path / "r.csv")
    for name in ("centers", "covariate", "u", "eta", "mu", "y"):
        assert np.array_equal(getattr(back, name), getattr(truth_a, name))
    s = sample_preferential(truth_a, 25, 0.5, 2)
    write_sample_csv(s, truth_a, tmp_path / "s.csv")
    t = read_sample_csv(tmp_path / "s.csv", "a")
    assert np.array_equal(t.cell_ids, s.cell_ids)
    assert np.array_equal(t.y, s.y)
    assert t.sampler == "preferential" and t.r == 0.5
    assert np.allclose(t.covariate, s.covariate, rtol=1e-14)


def test_cell_centers_row_major():
    c = cell_centers(4)
    assert np.allclose(c[1], [0.375, 0.125]) and np.allclose(c[4], [0.125, 0.375])
