"""Matérn (nu = 1) fields through the SPDE / GMRF representation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import kv

from .errors import InvalidHyperparameter
from .linalg import Factor
from .mesh import FemMatrices

NU = 1.0
DIM = 2
ALPHA_SMOOTH = NU + DIM / 2


@dataclass(frozen=True)
class MaternParams:
    rho: float
    sigma: float
    nu: float
    d: int
    alpha_smooth: float
    kappa: float
    tau: float


def matern_params(rho: float, sigma: float) -> MaternParams:
    if not (rho > 0 and sigma > 0 and np.isfinite(rho) and np.isfinite(sigma)):
        raise InvalidHyperparameter(f"rho and sigma must be positive, got rho={rho}, sigma={sigma}")
    kappa = math.sqrt(8.0 * NU) / rho
    tau2 = math.gamma(NU) / (
        math.gamma(ALPHA_SMOOTH) * (4.0 * math.pi) ** (DIM / 2) * kappa**2 * sigma**2
    )
    return MaternParams(
        rho=float(rho),
        sigma=float(sigma),
        nu=NU,
        d=DIM,
        alpha_smooth=ALPHA_SMOOTH,
        kappa=kappa,
        tau=math.sqrt(tau2),
    )


def matern_correlation(h, rho: float):
    """Matérn correlation with smoothness 1 at distance ``h`` for range ``rho``.

    The argument is ``kappa * h`` with ``kappa = sqrt(8 nu) / rho``, so the
    correlation at ``h = rho`` is about 0.14, the same field the SPDE
    precision represents.
    """
    h = np.asarray(h, dtype=float)
    x = math.sqrt(8.0 * NU) * h / rho
    with np.errstate(invalid="ignore"):
        c = 2.0 ** (1.0 - NU) / math.gamma(NU) * x**NU * kv(NU, x)
    # x K_1(x) -> 1 as x -> 0; kv overflows for subnormal x
    c = np.where(x < 1e-8, 1.0, c)
    return c if c.ndim else float(c)


def precision_matrix(params: MaternParams, fem: FemMatrices) -> sp.csc_matrix:
    """Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G)."""
    k2 = params.kappa**2
    Q = params.tau**2 * (k2 * k2 * fem.C + 2.0 * k2 * fem.G + fem.GCiG)
    return sp.csc_matrix(Q)


def check_positive_definite(Q) -> Factor:
    """Factor ``Q``; raises NotPositiveDefinite on failure."""
    return Factor(Q)


def sample_field(Q, seed: int, factor: Factor | None = None) -> np.ndarray:
    """One draw from N(0, Q^{-1}), deterministic given ``seed``."""
    F = factor if factor is not None else Factor(Q)
    z = np.random.default_rng(seed).standard_normal(F.n)
    return F.solve_Lt(z)


def covariance_columns(Q, nodes, factor: Factor | None = None) -> np.ndarray:
    """Columns of Q^{-1} for the given node indices, shape (n, len(nodes))."""
    F = factor if factor is not None else Factor(Q)
    nodes = np.atleast_1d(nodes)
    E = np.zeros((F.n, len(nodes)))
    E[nodes, np.arange(len(nodes))] = 1.0
    return F.solve(E)


def implied_correlation(Q, pairs, factor: Factor | None = None) -> np.ndarray:
    """Correlation between node pairs under N(0, Q^{-1})."""
    pairs = np.atleast_2d(pairs)
    F = factor if factor is not None else Factor(Q)
    cols = np.unique(pairs[:, 0])
    cov = covariance_columns(Q, cols, F)
    where = {c: k for k, c in enumerate(cols)}
    var = F.inverse_diagonal()
    out = np.empty(len(pairs))
    for k, (i, j) in enumerate(pairs):
        out[k] = cov[j, where[i]] / np.sqrt(var[i] * var[j])
    return out
