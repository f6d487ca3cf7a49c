import math

import numpy as np
import pytest

from bayesfeed.errors import AsymmetryViolation, DegenerateRatio, EmptyPool, InsufficientSupport, SpecMismatch
from bayesfeed.feedback import (
    FeedbackPolicy,
    alpha_from_moments,
    alpha_propagation,
    apply_policy,
    full_update_hyper,
    pool_posteriors,
    tabulate_marginal,
    update_by_moments,
)
from bayesfeed.infer import FitResult, HyperMarginal, fit_im
from bayesfeed.mesh import assemble_fem, build_regular_mesh
from bayesfeed.priors import (
    ENPriorSpec,
    PCPriorSpec,
    TabulatedPrior,
    TabulatedSpatial,
    base_priors,
    spatial_marginal_pdf,
)


def lognormal_marginal(name, median, sdlog, n_support=7):
    x = np.exp(np.linspace(math.log(median) - 5 * sdlog, math.log(median) + 5 * sdlog, 801))
    d = np.exp(-0.5 * ((np.log(x) - math.log(median)) / sdlog) ** 2) / x
    d /= np.trapezoid(d, x)
    support = np.exp(math.log(median) + sdlog * np.linspace(-1.5, 1.5, n_support))
    return HyperMarginal(name, x, d, support, np.full(n_support, 1.0 / n_support))


def make_fit(variant, fixed, n_support=7):
    names = tuple(fixed)
    mean = np.array([fixed[n][0] for n in names])
    sd = np.array([fixed[n][1] for n in names])
    q = np.column_stack([mean - 1.96 * sd, mean, mean + 1.96 * sd])
    hyper = {
        "rho": lognormal_marginal("rho", 0.42, 0.3, n_support),
        "sigma": lognormal_marginal("sigma", 0.9, 0.2, n_support),
        "phi": lognormal_marginal("phi", 14.0, 0.25, n_support),
    }
    hn = ("log_rho", "log_sigma", "log_phi") + (("alpha",) if variant == "PM" else ())
    return FitResult(variant, "PC", names, mean, sd, q, hyper, [], np.zeros(len(hn)), np.ones(len(hn)), hn, {})


PM_SOURCE = make_fit("PM", {"beta0": (-0.9, 0.2), "beta1": (0.97, 0.08), "beta0p": (4.0, 0.3), "beta1p": (0.1, 0.2)})
IM_SOURCE = make_fit("IM", {"beta0": (-1.1, 0.25), "beta1": (1.02, 0.1)})


def test_moment_update_pc():
    target = base_priors("IM", "PC")
    out = update_by_moments(PM_SOURCE, target, FeedbackPolicy("PM->IM"))
    assert out.beta1.mean == pytest.approx(0.97, abs=1e-12)
    assert out.beta1.precision == pytest.approx(156.25, rel=1e-12)
    assert out.beta0.sd == pytest.approx(0.2, rel=1e-12)
    assert isinstance(out.spatial, PCPriorSpec)
    assert out.spatial.rho0 == pytest.approx(0.42, abs=1e-3)
    assert out.spatial.sigma0 == pytest.approx(0.9, abs=1e-3)
    assert out.spatial.p_rho0 == 0.5 and out.spatial.p_sigma0 == 0.5
    assert out.phi is target.phi


def test_moment_update_en():
    target = base_priors("IM", "EN")
    out = update_by_moments(PM_SOURCE, target, FeedbackPolicy("PM->IM"))
    s = out.spatial
    assert isinstance(s, ENPriorSpec)
    assert s.rho0 == target.spatial.rho0
    assert s.rho0 * math.exp(s.mu2) == pytest.approx(0.42, rel=1e-3)
    assert s.sigma2 == pytest.approx(0.3, rel=1e-3)
    assert s.sigma0 * math.exp(s.mu1) == pytest.approx(0.9, rel=1e-3)
    assert s.sigma1 == pytest.approx(0.2, rel=1e-3)


def test_asymmetry_im_to_pm():
    target = base_priors("PM", "PC")
    out = update_by_moments(IM_SOURCE, target, FeedbackPolicy("IM->PM"))
    assert out.beta0p == target.beta0p and out.beta1p == target.beta1p
    assert out.alpha == target.alpha and out.phi == target.phi
    assert out.beta0.mean == -1.1 and out.beta1.mean == 1.02


def test_asymmetry_pm_to_im():
    target = base_priors("IM", "PC")
    out = update_by_moments(PM_SOURCE, target, FeedbackPolicy("PM->IM"))
    for name in ("beta0", "beta1", "spatial"):
        assert getattr(out, name) != getattr(target, name)
    assert out.phi == target.phi
    assert out.beta0p is None and out.alpha is None


def test_direction_mismatch():
    with pytest.raises(AsymmetryViolation):
        update_by_moments(IM_SOURCE, base_priors("IM", "PC"), FeedbackPolicy("PM->IM"))
    with pytest.raises(AsymmetryViolation):
        update_by_moments(PM_SOURCE, base_priors("PM", "PC"), FeedbackPolicy("IM->PM"))
    with pytest.raises(SpecMismatch):
        FeedbackPolicy("IM->IM")


def test_include_phi():
    out = update_by_moments(PM_SOURCE, base_priors("IM", "PC"), FeedbackPolicy("PM->IM", include_phi=True))
    m, s = PM_SOURCE.hyper["phi"].mean, PM_SOURCE.hyper["phi"].sd
    assert out.phi.shape / out.phi.rate == pytest.approx(m, rel=1e-12)
    assert math.sqrt(out.phi.shape) / out.phi.rate == pytest.approx(s, rel=1e-12)


def test_idempotent():
    pol = FeedbackPolicy("PM->IM")
    once = update_by_moments(PM_SOURCE, base_priors("IM", "EN"), pol)
    twice = update_by_moments(PM_SOURCE, once, pol)
    assert once == twice


def test_full_update():
    target = base_priors("IM", "PC")
    out = full_update_hyper(PM_SOURCE, target)
    assert isinstance(out.spatial, TabulatedSpatial)
    m = PM_SOURCE.hyper["rho"]
    assert np.allclose(out.spatial.rho.pdf(m.values), m.density, rtol=1e-10)
    assert out.beta1.precision == pytest.approx(156.25)
    assert out.phi == target.phi
    assert apply_policy(PM_SOURCE, target, FeedbackPolicy("PM->IM", "full-hyper")).spatial.rho == out.spatial.rho


def test_insufficient_support():
    thin = make_fit("PM", {"beta0": (0, 1), "beta1": (0, 1)}, n_support=3)
    with pytest.raises(InsufficientSupport):
        tabulate_marginal(thin.hyper["rho"])
    with pytest.raises(InsufficientSupport):
        full_update_hyper(thin, base_priors("IM", "PC"))


def test_tabulated_base_prior_reproduces_fit(sample_a):
    mesh = build_regular_mesh(11, 11, 0.1)
    fem = assemble_fem(mesh)
    base = base_priors("IM", "PC")
    r, s = np.geomspace(0.004, 25, 4000), np.geomspace(5e-4, 60, 4000)
    tab = TabulatedSpatial(
        TabulatedPrior(r, np.log(spatial_marginal_pdf(base.spatial, "rho", r))),
        TabulatedPrior(s, np.log(spatial_marginal_pdf(base.spatial, "sigma", s))),
    )
    a = fit_im(sample_a, mesh, base, fem)
    b = fit_im(sample_a, mesh, base.with_(spatial=tab), fem)
    assert np.max(np.abs(a.mean - b.mean)) < 1e-3
    for k in a.hyper:
        assert b.hyper[k].mean == pytest.approx(a.hyper[k].mean, abs=1e-3)


def test_alpha_examples():
    prior = alpha_from_moments(1.0, 0.1, 2.0, 0.2)
    assert prior.mean == pytest.approx(0.5)
    assert prior.sd == pytest.approx(0.5 * math.sqrt(0.02), rel=1e-12)
    with pytest.raises(DegenerateRatio):
        alpha_from_moments(1.0, 0.0, 2.0, 0.0)
    with pytest.raises(DegenerateRatio):
        alpha_from_moments(1.0, 0.1, 0.0, 0.1)


@pytest.mark.parametrize("cv_pp,cv_g", [(0.1, 0.1), (0.15, 0.05), (0.05, 0.15)])
def test_alpha_monte_carlo(cv_pp, cv_g):
    rng = np.random.default_rng(21)
    m_pp, m_g = 1.3, 2.1

    def draws(m, cv, n):
        s2 = math.log1p(cv * cv)
        return rng.lognormal(math.log(m) - 0.5 * s2, math.sqrt(s2), n)

    ratio = draws(m_pp, cv_pp, 100_000) / draws(m_g, cv_g, 100_000)
    prior = alpha_from_moments(m_pp, m_pp * cv_pp, m_g, m_g * cv_g)
    assert prior.sd == pytest.approx(ratio.std(), rel=0.10)


def test_alpha_propagation_uses_sigma_marginals():
    pp = make_fit("PM", {"beta0": (0, 1), "beta1": (0, 1)})
    prior = alpha_propagation(pp, IM_SOURCE)
    assert prior.mean == pytest.approx(pp.hyper["sigma"].mean / IM_SOURCE.hyper["sigma"].mean)


def _uniform(a, b):
    v = np.linspace(a, b, 11)
    return TabulatedPrior.from_density(v, np.ones_like(v))


def test_pooling():
    tp = TabulatedPrior.from_density(np.linspace(0, 3, 13), np.exp(-np.linspace(0, 3, 13)))
    single = pool_posteriors([(tp, 1.0)])
    x = np.linspace(0, 3, 50)
    assert np.allclose(single.pdf(x), tp.pdf(x), rtol=1e-9)
    both = pool_posteriors([(tp, 0.5), (tp, 0.5)])
    assert np.allclose(both.pdf(x), tp.pdf(x), rtol=1e-9)
    mix = pool_posteriors([(_uniform(0, 1), 0.3), (_uniform(2, 4), 0.7)])
    assert mix.integrate() == pytest.approx(1.0, abs=1e-3)
    fine = np.linspace(-0.1, 4.1, 200001)
    dens = mix.pdf(fine)
    left = np.trapezoid(np.where(fine < 1.5, dens, 0), fine)
    assert left == pytest.approx(0.3, abs=1e-3)
    with pytest.raises(EmptyPool):
        pool_posteriors([])
