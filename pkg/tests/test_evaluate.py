import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bayesfeed.errors import IncompleteStudy, ShapeError
from bayesfeed.evaluate import MetricRow, PredictiveMap, bias, improvement_proportion, residuals, rmse

finite = st.floats(-1e3, 1e3, allow_nan=False)


def pmap(pred):
    pred = np.asarray(pred, float)
    return PredictiveMap(pred, pred, np.zeros_like(pred), np.zeros_like(pred))


def test_trivial_cases():
    y = np.array([1.0, 2.0, 3.5])
    assert rmse(pmap(y), y) == 0 and bias(pmap(y), y) == 0
    assert rmse(pmap(y + 1), y) == pytest.approx(1.0) and bias(pmap(y + 1), y) == pytest.approx(1.0)
    assert bias(pmap(y - 0.7), y, "median") == pytest.approx(-0.7)
    with pytest.raises(ShapeError):
        rmse(pmap(y[:2]), y)


@settings(max_examples=100, deadline=None)
@given(data=st.data(), n=st.integers(1, 40))
def test_decomposition_and_ordering(data, n):
    y = data.draw(arrays(float, n, elements=finite))
    p = data.draw(arrays(float, n, elements=finite))
    r, b = rmse(pmap(p), y), bias(pmap(p), y)
    assert r >= abs(b) - 1e-9
    assert r**2 == pytest.approx(b**2 + np.var(p - y), abs=1e-9 * max(1.0, r**2))
    perm = np.random.default_rng(n).permutation(n)
    assert rmse(pmap(p[perm]), y[perm]) == pytest.approx(r, rel=1e-12, abs=1e-12)


def test_residuals():
    y = np.arange(25.0)
    out = residuals(pmap(y), y)
    assert np.all(out["residuals"] == 0)
    assert (out["counts"] > 0).sum() == 1 and out["counts"].sum() == 25
    out = residuals(pmap(y + np.sin(y)), y)
    assert out["counts"].sum() == 25 and len(out["edges"]) == 31
    assert out["pairs"].shape == (25, 2)


def rows(values):
    out = []
    for sid, (a, b) in enumerate(values):
        out.append(MetricRow(f"s{sid}", "PM", "EN", "feedback", "mean", a, 0.0))
        out.append(MetricRow(f"s{sid}", "PM", "EN", "base", "mean", b, 0.0))
    return out


def test_improvement_proportion():
    cmp = ("PM-EN-feedback", "PM-EN-base")
    assert improvement_proportion(rows([(1, 1), (2, 2)]), cmp, "mean") == 0
    assert improvement_proportion(rows([(1, 2), (3, 2)]), cmp, "mean") == 0.5
    with pytest.raises(IncompleteStudy):
        improvement_proportion(rows([(1, 2)])[:1], cmp, "mean")
    with pytest.raises(IncompleteStudy):
        improvement_proportion([], cmp)
