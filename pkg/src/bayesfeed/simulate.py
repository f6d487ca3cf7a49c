"""Synthetic truth rasters and the two sampling designs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidHyperparameter, InvalidShape, PreferentialityTooHigh, SampleTooLarge
from .mesh import assemble_fem, build_regular_mesh, projector
from .spde import matern_params, precision_matrix, sample_field

SHAPES = ("a", "b", "c")

RASTER_COLUMNS = ["cell_id", "x_coord", "y_coord", "covariate", "u", "eta", "mu", "y"]
SAMPLE_COLUMNS = RASTER_COLUMNS + ["draw_order", "sampler", "r"]


def covariate_field(shape: str, locations) -> np.ndarray:
    loc = np.atleast_2d(np.asarray(locations, dtype=float))
    x, y = loc[:, 0], loc[:, 1]
    if shape == "a":
        return 0.5 + x + 0.8 * (y - 0.5) ** 2
    if shape == "b":
        return -1.0 + 1.7 * x**2 + 0.3 / ((y - 0.5) ** 2 + 0.1)
    if shape == "c":
        return 0.7 + 0.5 * np.sin(2 * np.pi * x) ** 2 + np.sin(2 * np.pi * y) ** 2
    raise InvalidShape(f"unknown covariate shape {shape!r}; expected one of {SHAPES}")


def cell_centers(grid_n: int) -> np.ndarray:
    """Row-major centers of a ``grid_n`` x ``grid_n`` raster over the unit square."""
    c = (np.arange(grid_n) + 0.5) / grid_n
    xx, yy = np.meshgrid(c, c)
    return np.column_stack([xx.ravel(), yy.ravel()])


@dataclass(frozen=True, eq=False)
class TruthRaster:
    grid_n: int
    centers: np.ndarray
    covariate: np.ndarray
    u: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    y: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def n_cells(self) -> int:
        return len(self.y)

    @property
    def cell_area(self) -> float:
        return 1.0 / self.n_cells

    @property
    def shape(self) -> str:
        return self.params["shape"]

    def rows(self):
        for i in range(self.n_cells):
            yield [
                i,
                self.centers[i, 0],
                self.centers[i, 1],
                self.covariate[i],
                self.u[i],
                self.eta[i],
                self.mu[i],
                self.y[i],
            ]


@dataclass(frozen=True, eq=False)
class Sample:
    cell_ids: np.ndarray
    locations: np.ndarray
    y: np.ndarray
    covariate: np.ndarray
    shape: str
    sampler: str
    r: float = 0.0

    @property
    def n(self) -> int:
        return len(self.cell_ids)


@lru_cache(maxsize=8)
def _sim_mesh(mesh_n: int, extension: float):
    mesh = build_regular_mesh(mesh_n, mesh_n, extension)
    return mesh, assemble_fem(mesh)


def simulate_truth(
    shape: str,
    rho: float,
    sigma: float,
    beta0: float = -1.0,
    beta1: float = 1.0,
    phi: float = 15.0,
    grid_n: int = 50,
    seed: int = 0,
    mesh_n: int = 41,
    extension: float = 0.3,
) -> TruthRaster:
    """Simulate covariate, SPDE field and Gamma response on a raster.

    The Gamma law has shape ``phi`` and rate ``phi / mu``.
    """
    if not (rho > 0 and sigma > 0 and phi > 0):
        raise InvalidHyperparameter("rho, sigma and phi must be positive")
    if grid_n < 10:
        raise InvalidHyperparameter(f"grid_n must be at least 10, got {grid_n}")
    centers = cell_centers(grid_n)
    x = covariate_field(shape, centers)
    mesh, fem = _sim_mesh(mesh_n, extension)
    field_seed, gamma_seed = np.random.SeedSequence(seed).spawn(2)
    Q = precision_matrix(matern_params(rho, sigma), fem)
    w = sample_field(Q, int(field_seed.generate_state(1)[0]))
    u = projector(mesh, centers) @ w
    eta = beta0 + beta1 * x + u
    mu = np.exp(eta)
    rng = np.random.default_rng(gamma_seed)
    y = rng.gamma(shape=phi, scale=mu / phi)
    params = dict(beta0=beta0, beta1=beta1, rho=rho, sigma=sigma, phi=phi, shape=shape, seed=seed)
    return TruthRaster(grid_n, centers, x, u, eta, mu, y, params)


def _take(raster: TruthRaster, ids: np.ndarray, sampler: str, r: float) -> Sample:
    return Sample(
        cell_ids=ids,
        locations=raster.centers[ids],
        y=raster.y[ids],
        covariate=raster.covariate[ids],
        shape=raster.shape,
        sampler=sampler,
        r=float(r),
    )


def _gumbel_top_k(scores: np.ndarray, k: int, seed) -> np.ndarray:
    # top-k of score + Gumbel noise == sequential draws without replacement
    # with probabilities proportional to exp(score), renormalized each draw
    g = np.random.default_rng(seed).gumbel(size=len(scores))
    keys = scores + g
    order = np.argsort(-keys, kind="stable")
    return order[:k]


def sample_independent(raster: TruthRaster, n_s: int, seed) -> Sample:
    if n_s < 1 or n_s > raster.n_cells:
        raise SampleTooLarge(f"cannot draw {n_s} cells from {raster.n_cells}")
    ids = _gumbel_top_k(np.zeros(raster.n_cells), n_s, seed)
    return _take(raster, ids, "independent", 0.0)


def first_draw_probabilities(y, r: float) -> np.ndarray:
    s = r * np.asarray(y, dtype=float)
    s = s - s.max()
    p = np.exp(s)
    return p / p.sum()


def sample_preferential(
    raster: TruthRaster, n_s: int, r: float, seed, max_fraction: float = 0.1
) -> Sample:
    """Sequential draws with P(cell) proportional to exp(r * y), without replacement."""
    if n_s < 1 or n_s > raster.n_cells:
        raise SampleTooLarge(f"cannot draw {n_s} cells from {raster.n_cells}")
    if n_s / raster.n_cells > max_fraction:
        raise SampleTooLarge(
            f"n_s/n_cells = {n_s / raster.n_cells:.3f} exceeds {max_fraction}; discrete preferential "
            "sampling needs a small sampling fraction"
        )
    p = first_draw_probabilities(raster.y, r)
    if p.max() * n_s > 1.0:
        raise PreferentialityTooHigh(
            f"r={r}: top cell probability {p.max():.3g} times n_s={n_s} exceeds 1"
        )
    ids = _gumbel_top_k(r * raster.y, n_s, seed)
    return _take(raster, ids, "preferential", r)


def auto_preferentiality(raster: TruthRaster, n_s: int, r0: float = 2.0, max_halvings: int = 60) -> float:
    """Halve ``r0`` until the most likely cell cannot be exhausted."""
    r = r0
    for _ in range(max_halvings):
        if first_draw_probabilities(raster.y, r).max() * n_s <= 1.0:
            return r
        r *= 0.5
    return 0.0


# --------------------------------------------------------------------- CSV


def write_raster_csv(raster: TruthRaster, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RASTER_COLUMNS)
        for row in raster.rows():
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def write_sample_csv(sample: Sample, raster: TruthRaster, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SAMPLE_COLUMNS)
        for k, cid in enumerate(sample.cell_ids):
            row = [
                int(cid),
                raster.centers[cid, 0],
                raster.centers[cid, 1],
                raster.covariate[cid],
                raster.u[cid],
                raster.eta[cid],
                raster.mu[cid],
                raster.y[cid],
            ]
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]] + [k, sample.sampler, repr(sample.r)])


def read_sample_csv(path, shape: str) -> Sample:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: int(r["draw_order"]))
    loc = np.array([[float(r["x_coord"]), float(r["y_coord"])] for r in rows])
    return Sample(
        cell_ids=np.array([int(r["cell_id"]) for r in rows]),
        locations=loc,
        y=np.array([float(r["y"]) for r in rows]),
        covariate=covariate_field(shape, loc) if len(rows) else np.empty(0),
        shape=shape,
        sampler=rows[0]["sampler"] if rows else "independent",
        r=float(rows[0]["r"]) if rows else 0.0,
    )


def read_raster_csv(path, params: dict | None = None) -> TruthRaster:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    arr = {c: np.array([float(r[c]) for r in rows]) for c in RASTER_COLUMNS[1:]}
    n = len(rows)
    grid_n = int(round(math.sqrt(n)))
    return TruthRaster(
        grid_n=grid_n,
        centers=np.column_stack([arr["x_coord"], arr["y_coord"]]),
        covariate=arr["covariate"],
        u=arr["u"],
        eta=arr["eta"],
        mu=arr["mu"],
        y=arr["y"],
        params=dict(params or {}),
    )
