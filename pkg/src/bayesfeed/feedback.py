"""Posterior-to-prior feedback between the IM and PM fits.

Two protocols are supported.  ``moments`` keeps every prior kernel and only
moves its parameters to match the source posterior; ``full-hyper`` swaps
the spatial hyperpriors for tabulated copies of the source marginals.  The
latent layer (fixed effects) always uses moments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AsymmetryViolation, DegenerateRatio, EmptyPool, InsufficientSupport, SpecMismatch
from .infer import FitResult, HyperMarginal
from .priors import (
    ENPriorSpec,
    LogGammaPrior,
    NormalPrior,
    PCPriorSpec,
    PriorSet,
    TabulatedPrior,
    TabulatedSpatial,
)

DIRECTIONS = {"IM->PM": ("IM", "PM"), "PM->IM": ("PM", "IM")}
PROTOCOLS = ("moments", "full-hyper")
MIN_SUPPORT = 5
SHARED_FIXED = ("beta0", "beta1")


@dataclass(frozen=True)
class FeedbackPolicy:
    direction: str = "PM->IM"
    protocol: str = "moments"
    include_phi: bool = False
    include_alpha_propagation: bool = False

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise SpecMismatch(f"direction must be one of {tuple(DIRECTIONS)}, got {self.direction!r}")
        if self.protocol not in PROTOCOLS:
            raise SpecMismatch(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")

    @property
    def source_variant(self) -> str:
        return DIRECTIONS[self.direction][0]

    @property
    def target_variant(self) -> str:
        return DIRECTIONS[self.direction][1]


def _check_direction(source: FitResult, target: PriorSet, policy: FeedbackPolicy) -> None:
    if source.variant != policy.source_variant or target.variant != policy.target_variant:
        raise AsymmetryViolation(
            f"policy {policy.direction} cannot map a {source.variant} fit onto {target.variant} priors"
        )


def _fixed_effect_updates(source: FitResult, names) -> dict:
    out = {}
    for name in names:
        if name not in source.latent_names:
            raise AsymmetryViolation(f"{source.variant} fit has no posterior for {name}")
        s = source.summary(name)
        out[name] = NormalPrior(mean=s["mean"], precision=1.0 / s["sd"] ** 2)
    return out


def _moment_spatial(source: FitResult, target):
    rho, sigma = source.hyper["rho"], source.hyper["sigma"]
    if isinstance(target, PCPriorSpec):
        return PCPriorSpec(rho0=rho.median, p_rho0=0.5, sigma0=sigma.median, p_sigma0=0.5)
    if isinstance(target, ENPriorSpec):
        m_r, s_r = rho.log_moments()
        m_s, s_s = sigma.log_moments()
        return ENPriorSpec(
            rho0=target.rho0,
            sigma0=target.sigma0,
            mu1=m_s - math.log(target.sigma0),
            sigma1=s_s,
            mu2=m_r - math.log(target.rho0),
            sigma2=s_r,
        )
    raise SpecMismatch(f"moment matching needs an EN or PC target, got {type(target).__name__}")


def _moment_phi(source: FitResult) -> LogGammaPrior:
    phi = source.hyper["phi"]
    m, s = phi.mean, phi.sd
    return LogGammaPrior(shape=m * m / (s * s), rate=m / (s * s))


def update_by_moments(source: FitResult, target_priors: PriorSet, policy: FeedbackPolicy) -> PriorSet:
    """Move the target prior parameters to the source posterior's moments.

    Only the parameters shared by both models change: the geostatistical
    fixed effects and the spatial hyperparameters (plus phi when opted in).
    """
    _check_direction(source, target_priors, policy)
    changes = _fixed_effect_updates(source, SHARED_FIXED)
    changes["spatial"] = _moment_spatial(source, target_priors.spatial)
    if policy.include_phi:
        changes["phi"] = _moment_phi(source)
    return target_priors.with_(**changes)


def tabulate_marginal(m: HyperMarginal) -> TabulatedPrior:
    if m.n_support < MIN_SUPPORT:
        raise InsufficientSupport(
            f"{m.name} marginal rests on {m.n_support} grid values; at least {MIN_SUPPORT} are needed"
        )
    with np.errstate(divide="ignore"):
        return TabulatedPrior(m.values, np.log(m.density))


def full_update_hyper(source: FitResult, target_priors: PriorSet, policy: FeedbackPolicy | None = None) -> PriorSet:
    """Replace the spatial hyperpriors by the source's tabulated marginals."""
    policy = policy or FeedbackPolicy(
        direction=f"{source.variant}->{target_priors.variant}", protocol="full-hyper"
    )
    _check_direction(source, target_priors, policy)
    spatial = TabulatedSpatial(rho=tabulate_marginal(source.hyper["rho"]), sigma=tabulate_marginal(source.hyper["sigma"]))
    changes = _fixed_effect_updates(source, SHARED_FIXED)
    changes["spatial"] = spatial
    if policy.include_phi:
        changes["phi"] = _moment_phi(source)
    return target_priors.with_(**changes)


def apply_policy(source: FitResult, target_priors: PriorSet, policy: FeedbackPolicy) -> PriorSet:
    if policy.protocol == "moments":
        return update_by_moments(source, target_priors, policy)
    return full_update_hyper(source, target_priors, policy)


def alpha_from_moments(m_pp: float, sd_pp: float, m_g: float, sd_g: float) -> NormalPrior:
    """First-order (delta-method) law of the ratio ``sigma_pp / sigma_g``."""
    if not (m_g > 0 and m_pp > 0):
        raise DegenerateRatio(f"field scales must be positive, got {m_pp} and {m_g}")
    alpha = m_pp / m_g
    sd = alpha * math.sqrt((sd_pp / m_pp) ** 2 + (sd_g / m_g) ** 2)
    if not sd > 0:
        raise DegenerateRatio("zero uncertainty leaves the alpha precision undefined")
    return NormalPrior(mean=alpha, precision=1.0 / sd**2)


def alpha_propagation(pp_fit: FitResult, geo_fit: FitResult) -> NormalPrior:
    """Prior for the sharing coefficient from a point-process and a geostatistical fit."""
    s_pp, s_g = pp_fit.hyper["sigma"], geo_fit.hyper["sigma"]
    return alpha_from_moments(s_pp.mean, s_pp.sd, s_g.mean, s_g.sd)


def pool_posteriors(sources) -> TabulatedPrior:
    """Weighted mixture of tabulated densities on the union of their grids.

    Each source contributes zero outside its own support.
    """
    sources = list(sources)
    if not sources:
        raise EmptyPool("no posteriors to pool")
    weights = np.array([float(w) for _, w in sources])
    if np.any(weights < 0) or not weights.sum() > 0:
        raise SpecMismatch("pooling weights must be nonnegative with positive sum")
    weights = weights / weights.sum()
    grids = []
    for tp, _ in sources:
        eps = 1e-9 * max(tp.span, 1.0)
        grids += [tp.values, [tp.values[0] - eps, tp.values[-1] + eps]]
    grid = np.unique(np.concatenate(grids))
    dens = np.zeros_like(grid)
    for (tp, _), w in zip(sources, weights):
        inside = (grid >= tp.values[0]) & (grid <= tp.values[-1])
        d = np.zeros_like(grid)
        d[inside] = tp.pdf(grid[inside]) / tp.integrate()
        dens += w * d
    return TabulatedPrior.from_density(grid, dens)
