import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from bayesfeed.errors import InvalidHyperparameter
from bayesfeed.mesh import assemble_fem, build_regular_mesh
from bayesfeed.spde import (
    check_positive_definite,
    implied_correlation,
    matern_correlation,
    matern_params,
    precision_matrix,
    sample_field,
)


def k1_integral(z):
    # K_1(z) = int_0^inf exp(-z cosh t) cosh t dt, independent of scipy.special.kv
    upper = math.acosh(1.0 + 800.0 / z)  # integrand below exp(-800) beyond this
    return quad(lambda t: math.exp(-z * math.cosh(t)) * math.cosh(t), 0, upper, epsabs=0, epsrel=1e-12, limit=200)[0]


@pytest.mark.parametrize("h", [0.05, 0.2, 0.5, 1.0, 2.0])
def test_matern_correlation_against_integral_oracle(h):
    rho = 0.5
    x = math.sqrt(8) * h / rho
    assert matern_correlation(h, rho) == pytest.approx(x * k1_integral(x), rel=1e-8)


def test_matern_correlation_limits():
    assert matern_correlation(0.0, 0.3) == 1.0
    assert matern_correlation(0.3, 0.3) == pytest.approx(0.1399, abs=1e-3)
    assert matern_correlation(10.0, 0.3) < 1e-20


@settings(max_examples=40, deadline=None)
@given(h1=st.floats(0, 3), h2=st.floats(0, 3), rho=st.floats(0.05, 2))
def test_matern_correlation_monotone(h1, h2, rho):
    lo, hi = sorted((h1, h2))
    assert 0.0 <= matern_correlation(hi, rho) <= matern_correlation(lo, rho) <= 1.0


def test_matern_params_values():
    p = matern_params(0.5, 2.0)
    assert p.kappa == pytest.approx(math.sqrt(8) / 0.5)
    assert p.tau**2 == pytest.approx(1.0 / (4 * math.pi * p.kappa**2 * 4.0))
    assert (p.nu, p.d, p.alpha_smooth) == (1.0, 2, 2.0)
    for bad in [(0, 1), (1, 0), (-1, 1), (float("nan"), 1)]:
        with pytest.raises(InvalidHyperparameter):
            matern_params(*bad)


def test_precision_is_symmetric_positive_definite():
    mesh = build_regular_mesh(11, 11, 0.3)
    fem = assemble_fem(mesh)
    Q = precision_matrix(matern_params(0.3, 1.0), fem)
    assert abs(Q - Q.T).max() < 1e-10
    check_positive_definite(Q)


def test_marginal_variance_and_correlation_in_the_interior():
    mesh = build_regular_mesh(31, 31, 0.3)
    fem = assemble_fem(mesh)
    rho, sigma = 0.3, 1.5
    Q = precision_matrix(matern_params(rho, sigma), fem)
    centre = int(np.argmin(np.sum((mesh.nodes - 0.5) ** 2, axis=1)))
    target = mesh.nodes[centre] + [rho, 0.0]
    other = int(np.argmin(np.sum((mesh.nodes - target) ** 2, axis=1)))
    c = implied_correlation(Q, [[centre, other]])[0]
    assert c == pytest.approx(0.14, abs=0.03)
    from bayesfeed.linalg import Factor

    sd = math.sqrt(Factor(Q).inverse_diagonal()[centre])
    assert sd == pytest.approx(sigma, rel=0.1)


def test_sample_field_deterministic_and_covariance():
    mesh = build_regular_mesh(4, 4, 0.0)
    fem = assemble_fem(mesh)
    Q = precision_matrix(matern_params(0.5, 1.0), fem)
    assert np.array_equal(sample_field(Q, 3), sample_field(Q, 3))
    assert not np.array_equal(sample_field(Q, 3), sample_field(Q, 4))
    draws = np.array([sample_field(Q, s) for s in range(4000)])
    emp = np.cov(draws.T)
    exact = np.linalg.inv(Q.toarray())
    # Monte Carlo oracle: sd of a variance estimate is about var*sqrt(2/n)
    assert np.allclose(np.diag(emp), np.diag(exact), rtol=0.08)
