"""Prior families for the fixed effects and the hyperparameters.

Hyperparameters are handled on the inference engine's internal scale
``(log rho, log sigma, log phi, alpha)``; every density evaluated there
carries the Jacobian of the log transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Union

import numpy as np
from scipy.special import gammaln

from .errors import InvalidHyperparameter, ShapeError, SpecMismatch

DIM = 2
LOG_2PI = math.log(2.0 * math.pi)
LOG_ZERO = -1e300

HYPER_NAMES = {
    "IM": ("log_rho", "log_sigma", "log_phi"),
    "PM": ("log_rho", "log_sigma", "log_phi", "alpha"),
    "PP": ("log_rho", "log_sigma"),
}

DEFAULT_RHO0 = math.sqrt(2.0) / 5.0
DEFAULT_SIGMA0 = 1.0


def _normal_logpdf(x, mean, sd):
    z = (np.asarray(x, dtype=float) - mean) / sd
    return -0.5 * z * z - math.log(sd) - 0.5 * LOG_2PI


@dataclass(frozen=True)
class NormalPrior:
    mean: float = 0.0
    precision: float = 0.001

    def __post_init__(self):
        if not self.precision > 0:
            raise InvalidHyperparameter(f"precision must be positive, got {self.precision}")

    @property
    def sd(self) -> float:
        return 1.0 / math.sqrt(self.precision)

    def logpdf(self, x):
        return _normal_logpdf(x, self.mean, self.sd)


@dataclass(frozen=True)
class LogGammaPrior:
    """Gamma(shape, rate) on phi, expressed as a density for log(phi)."""

    shape: float = 1.0
    rate: float = 5e-5

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise InvalidHyperparameter("log-Gamma parameters must be positive")

    def logpdf_log(self, theta):
        theta = np.asarray(theta, dtype=float)
        return (
            self.shape * math.log(self.rate)
            - gammaln(self.shape)
            + self.shape * theta
            - self.rate * np.exp(theta)
        )


@dataclass(frozen=True)
class ENPriorSpec:
    """log(sigma/sigma0) ~ N(mu1, sigma1), log(rho/rho0) ~ N(mu2, sigma2); sd parameterization."""

    rho0: float = DEFAULT_RHO0
    sigma0: float = DEFAULT_SIGMA0
    mu1: float = 0.0
    sigma1: float = 1.0
    mu2: float = 0.0
    sigma2: float = 1.0

    def __post_init__(self):
        if not (self.rho0 > 0 and self.sigma0 > 0 and self.sigma1 > 0 and self.sigma2 > 0):
            raise InvalidHyperparameter(f"invalid EN prior {self}")

    family = "EN"


@dataclass(frozen=True)
class PCPriorSpec:
    rho0: float = DEFAULT_RHO0
    p_rho0: float = 0.5
    sigma0: float = DEFAULT_SIGMA0
    p_sigma0: float = 0.5

    def __post_init__(self):
        if not (self.rho0 > 0 and self.sigma0 > 0):
            raise InvalidHyperparameter(f"invalid PC prior {self}")
        if not (0 < self.p_rho0 < 1 and 0 < self.p_sigma0 < 1):
            raise InvalidHyperparameter("PC tail probabilities must lie in (0, 1)")

    family = "PC"

    @property
    def lambda1(self) -> float:
        return -math.log(self.p_rho0) * self.rho0 ** (DIM / 2)

    @property
    def lambda2(self) -> float:
        return -math.log(self.p_sigma0) / self.sigma0


@dataclass(frozen=True, eq=False)
class TabulatedPrior:
    """Density on a grid, interpolated linearly in log-density.

    Outside the grid the end segments are extended linearly (never rising
    outward) for up to three times the grid span, and the density is zero
    beyond that.
    """

    values: np.ndarray
    log_density: np.ndarray

    family = "tabulated"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        ld = np.asarray(self.log_density, dtype=float)
        if v.ndim != 1 or v.shape != ld.shape:
            raise ShapeError("values and log_density must be 1-D arrays of equal length")
        if len(v) < 5:
            raise InvalidHyperparameter(f"a tabulated prior needs at least 5 support points, got {len(v)}")
        if np.any(np.diff(v) <= 0):
            raise InvalidHyperparameter("support points must be strictly increasing")
        if np.any(np.isnan(ld)):
            raise InvalidHyperparameter("log-density contains NaN")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "log_density", np.maximum(ld, LOG_ZERO))

    def __eq__(self, other):
        if not isinstance(other, TabulatedPrior):
            return NotImplemented
        return np.array_equal(self.values, other.values) and np.array_equal(
            self.log_density, other.log_density
        )

    __hash__ = None

    @classmethod
    def from_density(cls, values, density) -> "TabulatedPrior":
        """Build from (unnormalized) density values; the result integrates to one on its support."""
        density = np.asarray(density, dtype=float)
        if np.any(density < 0):
            raise InvalidHyperparameter("density must be nonnegative")
        with np.errstate(divide="ignore"):
            ld = np.log(density)
        tp = cls(np.asarray(values, dtype=float), ld)
        mass = tp.integrate()
        if not mass > 0:
            raise InvalidHyperparameter("density has zero mass")
        return cls(tp.values, tp.log_density - math.log(mass))

    @property
    def span(self) -> float:
        return float(self.values[-1] - self.values[0])

    def logpdf(self, v):
        v = np.asarray(v, dtype=float)
        x, ld = self.values, self.log_density
        out = np.interp(v, x, ld)
        with np.errstate(over="ignore"):
            # an end segment dropping to LOG_ZERO gives an infinite slope, i.e. a hard edge
            left_slope = max((ld[1] - ld[0]) / (x[1] - x[0]), 0.0)
            right_slope = min((ld[-1] - ld[-2]) / (x[-1] - x[-2]), 0.0)
        lo = v < x[0]
        hi = v > x[-1]
        out = np.where(lo, ld[0] + left_slope * (v - x[0]), out)
        out = np.where(hi, ld[-1] + right_slope * (v - x[-1]), out)
        far = (v < x[0] - 3.0 * self.span) | (v > x[-1] + 3.0 * self.span)
        out = np.where(far | (out <= LOG_ZERO / 2), -np.inf, out)
        return out if out.ndim else float(out)

    def pdf(self, v):
        return np.exp(self.logpdf(v))

    def segment_masses(self) -> np.ndarray:
        """Exact integral of the log-linear interpolant over each grid segment."""
        x, ld = self.values, self.log_density
        dx = np.diff(x)
        a, b = ld[:-1], ld[1:]
        top = np.maximum(a, b)
        diff = a - b
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            small = np.abs(diff) < 1e-8
            # integral of exp(linear) between the two end values
            lin = np.where(
                small,
                dx * np.exp(0.5 * (a + b)),
                dx * (np.exp(a) - np.exp(b)) / np.where(small, 1.0, diff),
            )
        lin = np.where(top <= LOG_ZERO / 2, 0.0, lin)
        return np.abs(lin)

    def integrate(self) -> float:
        return float(np.sum(self.segment_masses()))

    def cdf(self, v):
        masses = np.concatenate([[0.0], np.cumsum(self.segment_masses())])
        total = masses[-1]
        return np.interp(v, self.values, masses / total)

    def quantile(self, p):
        masses = np.concatenate([[0.0], np.cumsum(self.segment_masses())])
        masses = masses / masses[-1]
        # strictly increasing abscissa for interpolation
        keep = np.concatenate([[True], np.diff(masses) > 0])
        return np.interp(p, masses[keep], self.values[keep])

    def expectation(self, fn=lambda v: v) -> float:
        fine = np.linspace(self.values[0], self.values[-1], 4 * len(self.values) + 1)
        fine = np.union1d(fine, self.values)
        p = self.pdf(fine)
        return float(np.trapezoid(fn(fine) * p, fine) / np.trapezoid(p, fine))

    def to_dict(self) -> dict:
        return {
            "values": self.values.tolist(),
            "log_density": [float(x) if x > LOG_ZERO else None for x in self.log_density],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabulatedPrior":
        ld = [LOG_ZERO if x is None else x for x in d["log_density"]]
        return cls(np.asarray(d["values"], dtype=float), np.asarray(ld, dtype=float))


@dataclass(frozen=True)
class TabulatedSpatial:
    """Independent tabulated densities for rho and sigma on the natural scale."""

    rho: TabulatedPrior
    sigma: TabulatedPrior

    family = "tabulated"


SpatialPrior = Union[ENPriorSpec, PCPriorSpec, TabulatedSpatial]


@dataclass(frozen=True)
class PriorSet:
    variant: str
    spatial: SpatialPrior
    beta0: NormalPrior | None = None
    beta1: NormalPrior | None = None
    phi: LogGammaPrior | None = None
    beta0p: NormalPrior | None = None
    beta1p: NormalPrior | None = None
    alpha: NormalPrior | None = None

    def __post_init__(self):
        if self.variant not in HYPER_NAMES:
            raise SpecMismatch(f"unknown variant {self.variant!r}")
        geo = (self.beta0, self.beta1, self.phi)
        pp = (self.beta0p, self.beta1p)
        if self.variant == "IM":
            ok = all(x is not None for x in geo) and all(x is None for x in pp) and self.alpha is None
        elif self.variant == "PM":
            ok = all(x is not None for x in geo + pp) and self.alpha is not None
        else:
            ok = all(x is not None for x in pp) and all(x is None for x in geo) and self.alpha is None
        if not ok:
            raise SpecMismatch(f"prior entries do not match variant {self.variant}")

    @property
    def family(self) -> str:
        return self.spatial.family

    def fixed_effects(self) -> dict[str, NormalPrior]:
        names = ("beta0", "beta1", "beta0p", "beta1p")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    def with_(self, **changes) -> "PriorSet":
        return replace(self, **changes)


def base_priors(variant: str, family: str, rho0: float = DEFAULT_RHO0, sigma0: float = DEFAULT_SIGMA0) -> PriorSet:
    """Uninformative defaults for a model variant and spatial prior family."""
    if family == "PC":
        spatial = PCPriorSpec(rho0=rho0, p_rho0=0.5, sigma0=sigma0, p_sigma0=0.5)
    elif family == "EN":
        spatial = ENPriorSpec(rho0=rho0, sigma0=sigma0)
    else:
        raise SpecMismatch(f"unknown prior family {family!r}")
    vague = NormalPrior(0.0, 0.001)
    kw: dict = {"variant": variant, "spatial": spatial}
    if variant in ("IM", "PM"):
        kw.update(beta0=vague, beta1=vague, phi=LogGammaPrior(1.0, 5e-5))
    if variant in ("PM", "PP"):
        kw.update(beta0p=vague, beta1p=vague)
    if variant == "PM":
        kw.update(alpha=NormalPrior(0.0, 0.1))
    return PriorSet(**kw)


# ---------------------------------------------------------------- densities


def pc_joint_density(rho, sigma, spec: PCPriorSpec):
    rho = np.asarray(rho, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(rho <= 0):
        raise InvalidHyperparameter("rho must be positive")
    l1, l2 = spec.lambda1, spec.lambda2
    d = DIM
    p_rho = d / 2 * l1 * rho ** (-1 - d / 2) * np.exp(-l1 * rho ** (-d / 2))
    p_sigma = np.where(sigma >= 0, l2 * np.exp(-l2 * np.abs(sigma)), 0.0)
    out = p_rho * p_sigma
    return out if out.ndim else float(out)


def en_joint_density(rho, sigma, spec: ENPriorSpec):
    rho = np.asarray(rho, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(rho <= 0) or np.any(sigma <= 0):
        raise InvalidHyperparameter("rho and sigma must be positive")
    a = (np.log(sigma / spec.sigma0) - spec.mu1) / spec.sigma1
    b = (np.log(rho / spec.rho0) - spec.mu2) / spec.sigma2
    out = np.exp(-0.5 * a * a - 0.5 * b * b) / (
        2.0 * math.pi * spec.sigma1 * spec.sigma2 * rho * sigma
    )
    return out if out.ndim else float(out)


def pc_cdf_rho(rho, spec: PCPriorSpec):
    rho = np.asarray(rho, dtype=float)
    return np.exp(-spec.lambda1 * rho ** (-DIM / 2))


def pc_survival_rho(rho, spec: PCPriorSpec):
    return -np.expm1(-spec.lambda1 * np.asarray(rho, dtype=float) ** (-DIM / 2))


def pc_cdf_sigma(sigma, spec: PCPriorSpec):
    return -np.expm1(-spec.lambda2 * np.asarray(sigma, dtype=float))


def pc_quantile_rho(p: float, spec: PCPriorSpec) -> float:
    """Inverse CDF of the PC range marginal, CDF(rho) = exp(-lambda1 rho^(-d/2))."""
    if not 0 < p < 1:
        raise InvalidHyperparameter(f"probability must lie in (0, 1), got {p}")
    return (-spec.lambda1 / math.log(p)) ** (2.0 / DIM)


def pc_quantile_sigma(p: float, spec: PCPriorSpec) -> float:
    if not 0 < p < 1:
        raise InvalidHyperparameter(f"probability must lie in (0, 1), got {p}")
    return -math.log1p(-p) / spec.lambda2


def spatial_log_prior(log_rho, log_sigma, spatial: SpatialPrior):
    """Joint log density of (log rho, log sigma), Jacobian included."""
    lr = np.asarray(log_rho, dtype=float)
    ls = np.asarray(log_sigma, dtype=float)
    if isinstance(spatial, PCPriorSpec):
        l1, l2 = spatial.lambda1, spatial.lambda2
        d = DIM
        rho_part = math.log(d / 2 * l1) - (1 + d / 2) * lr - l1 * np.exp(-d / 2 * lr) + lr
        sig_part = math.log(l2) - l2 * np.exp(ls) + ls
        return rho_part + sig_part
    if isinstance(spatial, ENPriorSpec):
        return _normal_logpdf(lr - math.log(spatial.rho0), spatial.mu2, spatial.sigma2) + _normal_logpdf(
            ls - math.log(spatial.sigma0), spatial.mu1, spatial.sigma1
        )
    if isinstance(spatial, TabulatedSpatial):
        return spatial.rho.logpdf(np.exp(lr)) + lr + spatial.sigma.logpdf(np.exp(ls)) + ls
    raise SpecMismatch(f"unsupported spatial prior {type(spatial).__name__}")


def log_prior_hyper(theta, priors: PriorSet) -> float:
    """Joint log prior of the internal hyperparameter vector."""
    theta = np.asarray(theta, dtype=float)
    names = HYPER_NAMES[priors.variant]
    if theta.shape != (len(names),):
        raise ShapeError(f"{priors.variant} expects {len(names)} hyperparameters, got shape {theta.shape}")
    total = float(spatial_log_prior(theta[0], theta[1], priors.spatial))
    if priors.variant in ("IM", "PM"):
        total += float(priors.phi.logpdf_log(theta[2]))
    if priors.variant == "PM":
        total += float(priors.alpha.logpdf(theta[3]))
    return total


# ------------------------------------------------------------ serialization


def _normal_to_dict(p: NormalPrior | None):
    return None if p is None else {"mean": p.mean, "precision": p.precision}


def spatial_to_dict(s: SpatialPrior) -> dict:
    if isinstance(s, PCPriorSpec):
        return {"family": "PC", "rho0": s.rho0, "p_rho0": s.p_rho0, "sigma0": s.sigma0, "p_sigma0": s.p_sigma0}
    if isinstance(s, ENPriorSpec):
        return {
            "family": "EN",
            "rho0": s.rho0,
            "sigma0": s.sigma0,
            "means": [s.mu1, s.mu2],
            "precisions": [1.0 / s.sigma1**2, 1.0 / s.sigma2**2],
        }
    return {"family": "tabulated", "rho": s.rho.to_dict(), "sigma": s.sigma.to_dict()}


def spatial_from_dict(d: dict) -> SpatialPrior:
    fam = d.get("family")
    if fam == "PC":
        return PCPriorSpec(
            rho0=float(d.get("rho0", DEFAULT_RHO0)),
            p_rho0=float(d.get("p_rho0", 0.5)),
            sigma0=float(d.get("sigma0", DEFAULT_SIGMA0)),
            p_sigma0=float(d.get("p_sigma0", 0.5)),
        )
    if fam == "EN":
        means = d.get("means", [0.0, 0.0])
        precs = d.get("precisions", [1.0, 1.0])
        return ENPriorSpec(
            rho0=float(d.get("rho0", DEFAULT_RHO0)),
            sigma0=float(d.get("sigma0", DEFAULT_SIGMA0)),
            mu1=float(means[0]),
            sigma1=1.0 / math.sqrt(float(precs[0])),
            mu2=float(means[1]),
            sigma2=1.0 / math.sqrt(float(precs[1])),
        )
    if fam == "tabulated":
        return TabulatedSpatial(TabulatedPrior.from_dict(d["rho"]), TabulatedPrior.from_dict(d["sigma"]))
    raise SpecMismatch(f"unknown prior family {fam!r}")


def prior_set_to_dict(p: PriorSet) -> dict:
    fixed = p.fixed_effects()
    out = {
        "variant": p.variant,
        "spatial": spatial_to_dict(p.spatial),
        "means": {k: v.mean for k, v in fixed.items()},
        "precisions": {k: v.precision for k, v in fixed.items()},
    }
    if p.phi is not None:
        out["phi"] = {"shape": p.phi.shape, "rate": p.phi.rate}
    if p.alpha is not None:
        out["alpha"] = _normal_to_dict(p.alpha)
    return out


def prior_set_from_dict(d: dict) -> PriorSet:
    variant = d["variant"]
    base = base_priors(variant, "PC")
    kw: dict = {"variant": variant, "spatial": spatial_from_dict(d["spatial"])}
    means = d.get("means", {})
    precs = d.get("precisions", {})
    for name, prior in base.fixed_effects().items():
        kw[name] = NormalPrior(float(means.get(name, prior.mean)), float(precs.get(name, prior.precision)))
    if base.phi is not None:
        ph = d.get("phi", {})
        kw["phi"] = LogGammaPrior(float(ph.get("shape", base.phi.shape)), float(ph.get("rate", base.phi.rate)))
    if base.alpha is not None:
        al = d.get("alpha") or {}
        kw["alpha"] = NormalPrior(float(al.get("mean", base.alpha.mean)), float(al.get("precision", base.alpha.precision)))
    return PriorSet(**kw)


def spatial_marginal_pdf(spatial: SpatialPrior, which: str, values) -> np.ndarray:
    """Marginal prior density of ``rho`` or ``sigma`` on the natural scale."""
    v = np.asarray(values, dtype=float)
    if which not in ("rho", "sigma"):
        raise SpecMismatch(f"which must be 'rho' or 'sigma', got {which!r}")
    if isinstance(spatial, TabulatedSpatial):
        return getattr(spatial, which).pdf(v)
    if isinstance(spatial, PCPriorSpec):
        if which == "rho":
            l1 = spatial.lambda1
            return DIM / 2 * l1 * v ** (-1 - DIM / 2) * np.exp(-l1 * v ** (-DIM / 2))
        return spatial.lambda2 * np.exp(-spatial.lambda2 * v)
    if isinstance(spatial, ENPriorSpec):
        if which == "rho":
            z = (np.log(v / spatial.rho0) - spatial.mu2) / spatial.sigma2
            return np.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * spatial.sigma2 * v)
        z = (np.log(v / spatial.sigma0) - spatial.mu1) / spatial.sigma1
        return np.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * spatial.sigma1 * v)
    raise SpecMismatch(f"unsupported spatial prior {type(spatial).__name__}")
