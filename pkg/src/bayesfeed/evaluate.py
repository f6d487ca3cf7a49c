"""Residual metrics for predictive maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IncompleteStudy, ShapeError

METRIC_COLUMNS = ["scenario_id", "model", "prior", "stage", "predictor", "rmse", "bias"]


@dataclass(frozen=True, eq=False)
class PredictiveMap:
    """Per-cell mean and median predictors of mu = exp(eta)."""

    mean: np.ndarray
    median: np.ndarray
    eta_mean: np.ndarray
    eta_sd: np.ndarray

    def predictor(self, which: str) -> np.ndarray:
        if which == "mean":
            return self.mean
        if which == "median":
            return self.median
        raise ValueError(f"predictor must be 'mean' or 'median', got {which!r}")


@dataclass(frozen=True)
class MetricRow:
    scenario_id: str
    model: str
    prior: str
    stage: str
    predictor: str
    rmse: float
    bias: float

    @property
    def tag(self) -> str:
        return f"{self.model}-{self.prior}-{self.stage}"

    def as_list(self) -> list:
        return [self.scenario_id, self.model, self.prior, self.stage, self.predictor, repr(self.rmse), repr(self.bias)]


def _pred_truth(pred_map, truth, predictor):
    pred = pred_map.predictor(predictor) if isinstance(pred_map, PredictiveMap) else np.asarray(pred_map, float)
    y = truth.y if hasattr(truth, "y") else np.asarray(truth, float)
    if pred.shape != y.shape:
        raise ShapeError(f"prediction has shape {pred.shape}, truth has {y.shape}")
    return pred, y


def rmse(pred_map, truth, predictor: str = "mean") -> float:
    pred, y = _pred_truth(pred_map, truth, predictor)
    return float(np.sqrt(np.mean((pred - y) ** 2)))


def bias(pred_map, truth, predictor: str = "mean") -> float:
    """Mean of (prediction - truth); positive means over-prediction."""
    pred, y = _pred_truth(pred_map, truth, predictor)
    return float(np.mean(pred - y))


def residuals(pred_map, truth, predictor: str = "mean", bins: int = 30) -> dict:
    pred, y = _pred_truth(pred_map, truth, predictor)
    res = pred - y
    lo, hi = float(res.min()), float(res.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(res, bins=bins, range=(lo, hi))
    return {
        "residuals": res,
        "counts": counts,
        "edges": edges,
        "pairs": np.column_stack([res, pred]),
    }


def improvement_proportion(rows, comparison, predictor: str | None = None) -> float:
    """Share of scenarios whose RMSE under ``tag_a`` is strictly below ``tag_b``."""
    tag_a, tag_b = comparison
    by = {}
    for r in rows:
        if predictor is not None and r.predictor != predictor:
            continue
        key = r.scenario_id if predictor is not None else (r.scenario_id, r.predictor)
        by.setdefault(key, {})[r.tag] = r.rmse
    if not by:
        raise IncompleteStudy("no metric rows")
    wins = 0
    for sid, tags in by.items():
        if tag_a not in tags or tag_b not in tags:
            raise IncompleteStudy(f"scenario {sid} lacks {tag_a!r} or {tag_b!r}")
        wins += tags[tag_a] < tags[tag_b]
    return wins / len(by)
