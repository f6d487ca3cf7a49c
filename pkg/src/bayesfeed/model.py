"""Declarative latent-Gaussian model descriptions for the IM, PM and PP variants.

The latent vector is laid out as ``[u_0 .. u_{n-1}, beta0, beta1]`` for IM,
``[u, beta0, beta1, beta0p, beta1p]`` for PM and ``[u, beta0p, beta1p]`` for
the standalone point-process fit (PP).  Each likelihood block maps the latent
vector to its linear predictor through a sparse design matrix; the
point-process block additionally scales its field columns by ``alpha``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from .errors import SpecMismatch
from .mesh import FemMatrices, Mesh, assemble_fem, projector
from .priors import HYPER_NAMES, PriorSet, log_prior_hyper
from .simulate import Sample, covariate_field
from .spde import matern_params, precision_matrix

LOG_2PI = math.log(2.0 * math.pi)
ETA_MAX = 700.0


# ----------------------------------------------------------------- families
# Each returns (log-likelihood sum, gradient wrt eta, negative second derivative).


def gamma_terms(eta, y, phi):
    """Gamma with shape phi and rate phi/exp(eta)."""
    e = y * np.exp(-eta)
    ll = np.sum(phi * math.log(phi) - phi * eta + (phi - 1.0) * np.log(y) - phi * e - gammaln(phi))
    return ll, phi * (e - 1.0), phi * e


def poisson_terms(eta, counts, exposure):
    """Poisson counts with exposure, without the log(count!) constant."""
    lam = exposure * np.exp(np.minimum(eta, ETA_MAX))
    ll = np.sum(counts * eta - lam)
    return ll, counts - lam, lam


def gaussian_terms(eta, y, prec):
    r = y - eta
    ll = np.sum(0.5 * math.log(prec) - 0.5 * LOG_2PI - 0.5 * prec * r * r)
    return ll, prec * r, np.full_like(eta, prec)


@dataclass(frozen=True, eq=False)
class LikelihoodBlock:
    """One likelihood acting on ``eta = fixed @ x + alpha * shared @ x``."""

    family: str
    fixed: sp.csr_matrix
    data: dict
    shared: sp.csr_matrix | None = None
    hyper_index: int | None = None

    @property
    def n_rows(self) -> int:
        return self.fixed.shape[0]

    def design(self, theta) -> sp.csr_matrix:
        if self.shared is None:
            return self.fixed
        return (self.fixed + theta[3] * self.shared).tocsr()

    def terms(self, eta, theta):
        if self.family == "gamma":
            return gamma_terms(eta, self.data["y"], math.exp(theta[self.hyper_index]))
        if self.family == "gaussian":
            return gaussian_terms(eta, self.data["y"], math.exp(theta[self.hyper_index]))
        if self.family == "poisson":
            return poisson_terms(eta, self.data["counts"], self.data["exposure"])
        raise SpecMismatch(f"unknown likelihood family {self.family!r}")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    variant: str
    mesh: Mesh
    fem: FemMatrices
    priors: PriorSet
    blocks: tuple
    latent_names: tuple
    sample: Sample | None = None
    obs_family: str = "gamma"
    pp_covariate: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.mesh.n_nodes

    @property
    def n_latent(self) -> int:
        return len(self.latent_names)

    @property
    def hyper_names(self) -> tuple:
        return HYPER_NAMES[self.variant]

    @property
    def fixed_names(self) -> tuple:
        return tuple(self.latent_names[self.n_nodes :])

    def index(self, name: str) -> int:
        return self.latent_names.index(name)

    def fixed_priors(self):
        return [getattr(self.priors, n) for n in self.fixed_names]

    def latent_prior(self, theta):
        """Prior precision and mean of the latent vector at ``theta``."""
        params = matern_params(math.exp(theta[0]), math.exp(theta[1]))
        Qu = precision_matrix(params, self.fem)
        fp = self.fixed_priors()
        Qf = sp.diags([p.precision for p in fp])
        Q = sp.block_diag([Qu, Qf], format="csc")
        mean = np.concatenate([np.zeros(self.n_nodes), [p.mean for p in fp]])
        return Q, mean

    def log_prior_hyper(self, theta) -> float:
        return log_prior_hyper(theta, self.priors)

    def linear_predictor(self, x, theta, block: int = 0) -> np.ndarray:
        return self.blocks[block].design(theta) @ x


def _latent_names(n_nodes: int, fixed: tuple) -> tuple:
    return tuple(f"u{i}" for i in range(n_nodes)) + fixed


def _geo_block(sample: Sample, mesh: Mesh, n_latent: int, family: str) -> LikelihoodBlock:
    n = mesh.n_nodes
    m = sample.n
    if m:
        A = projector(mesh, sample.locations)
        x = covariate_field(sample.shape, sample.locations)
    else:
        A = sp.csr_matrix((0, n))
        x = np.empty(0)
    fixed_cols = sp.csr_matrix(np.column_stack([np.ones(m), x])) if m else sp.csr_matrix((0, 2))
    pad = sp.csr_matrix((m, n_latent - n - 2))
    D = sp.hstack([A, fixed_cols, pad], format="csr")
    y = np.asarray(sample.y, dtype=float)
    return LikelihoodBlock(family, D, {"y": y, "covariate": x}, hyper_index=2)


def _pp_block(sample: Sample, mesh: Mesh, fem: FemMatrices, n_latent: int, offset: int, scaled: bool, use_cov: bool):
    """Point pattern block: points with count 1, mesh nodes with exposure = node weight."""
    n = mesh.n_nodes
    m = sample.n
    keep = np.flatnonzero(fem.node_weights > 0)
    node_xy = mesh.nodes[keep]
    if m:
        A = projector(mesh, sample.locations)
        x_pts = covariate_field(sample.shape, sample.locations)
    else:
        A = sp.csr_matrix((0, n))
        x_pts = np.empty(0)
    x_nodes = covariate_field(sample.shape, node_xy)
    if not use_cov:
        x_pts = np.zeros_like(x_pts)
        x_nodes = np.zeros_like(x_nodes)
    U = sp.vstack([A, sp.csr_matrix((np.ones(len(keep)), (np.arange(len(keep)), keep)), shape=(len(keep), n))])
    cov = np.concatenate([x_pts, x_nodes])
    rows = m + len(keep)
    F = sp.lil_matrix((rows, n_latent))
    F[:, offset] = 1.0
    if use_cov:
        F[:, offset + 1] = cov[:, None]
    F = F.tocsr()
    S = sp.hstack([U, sp.csr_matrix((rows, n_latent - n))], format="csr")
    counts = np.concatenate([np.ones(m), np.zeros(len(keep))])
    exposure = np.concatenate([np.zeros(m), fem.node_weights[keep]])
    data = {"counts": counts, "exposure": exposure, "covariate": cov}
    if scaled:
        return LikelihoodBlock("poisson", F, data, shared=S)
    return LikelihoodBlock("poisson", (F + S).tocsr(), data)


def _check(priors: PriorSet, variant: str):
    if priors.variant != variant:
        raise SpecMismatch(f"{variant} model needs a {variant} prior set, got {priors.variant}")


def build_im(sample: Sample, mesh: Mesh, priors: PriorSet, fem: FemMatrices | None = None, family: str = "gamma") -> ModelSpec:
    """Geostatistical model: response at sampled locations only.

    ``family="gaussian"`` swaps the Gamma response for a Gaussian one whose
    precision takes the ``log_phi`` slot; it exists for exactness checks.
    """
    _check(priors, "IM")
    fem = fem if fem is not None else assemble_fem(mesh)
    names = _latent_names(mesh.n_nodes, ("beta0", "beta1"))
    block = _geo_block(sample, mesh, len(names), family)
    return ModelSpec("IM", mesh, fem, priors, (block,), names, sample, obs_family=family)


def build_pm(
    sample: Sample,
    mesh: Mesh,
    priors: PriorSet,
    fem: FemMatrices | None = None,
    family: str = "gamma",
    pp_covariate: bool = True,
) -> ModelSpec:
    """Joint model: Gamma marks plus an LGCP on the sample locations sharing ``alpha * u``."""
    _check(priors, "PM")
    fem = fem if fem is not None else assemble_fem(mesh)
    names = _latent_names(mesh.n_nodes, ("beta0", "beta1", "beta0p", "beta1p"))
    geo = _geo_block(sample, mesh, len(names), family)
    pp = _pp_block(sample, mesh, fem, len(names), mesh.n_nodes + 2, scaled=True, use_cov=pp_covariate)
    return ModelSpec("PM", mesh, fem, priors, (geo, pp), names, sample, obs_family=family, pp_covariate=pp_covariate)


def build_pp(sample: Sample, mesh: Mesh, priors: PriorSet, fem: FemMatrices | None = None, pp_covariate: bool = True) -> ModelSpec:
    """Point-process-only model on the sample locations (field scale fixed to one)."""
    _check(priors, "PP")
    fem = fem if fem is not None else assemble_fem(mesh)
    names = _latent_names(mesh.n_nodes, ("beta0p", "beta1p"))
    pp = _pp_block(sample, mesh, fem, len(names), mesh.n_nodes, scaled=False, use_cov=pp_covariate)
    return ModelSpec("PP", mesh, fem, priors, (pp,), names, sample, pp_covariate=pp_covariate)


def prediction_design(spec: ModelSpec, locations, covariate=None) -> sp.csr_matrix:
    """Design mapping the latent vector to the response predictor at new locations."""
    loc = np.atleast_2d(np.asarray(locations, dtype=float))
    A = projector(spec.mesh, loc)
    if covariate is None:
        covariate = covariate_field(spec.sample.shape, loc)
    m = len(loc)
    if spec.variant == "PP":
        cols = [A, sp.csr_matrix(np.column_stack([np.ones(m), covariate if spec.pp_covariate else np.zeros(m)]))]
    else:
        cols = [A, sp.csr_matrix(np.column_stack([np.ones(m), covariate]))]
        extra = spec.n_latent - spec.n_nodes - 2
        if extra:
            cols.append(sp.csr_matrix((m, extra)))
    return sp.hstack(cols, format="csr")
