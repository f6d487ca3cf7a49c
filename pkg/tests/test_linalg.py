import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesfeed import linalg
from bayesfeed.errors import NotPositiveDefinite
from bayesfeed.linalg import Factor, takahashi


def random_spd(n, density, seed):
    rng = np.random.default_rng(seed)
    M = sp.random(n, n, density=density, random_state=rng, format="csc")
    A = M @ M.T + sp.diags(rng.uniform(0.5, 2.0, n))
    return sp.csc_matrix(A)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 60), density=st.floats(0.01, 0.3), seed=st.integers(0, 10_000))
def test_selected_inverse_matches_dense(n, density, seed):
    A = random_spd(n, density, seed)
    F = Factor(A)
    D = np.linalg.inv(A.toarray())
    S = F.selected_inverse().toarray()
    mask = A.toarray() != 0
    assert np.allclose(S[mask], D[mask], rtol=1e-9, atol=1e-12)
    assert np.allclose(F.inverse_diagonal(), np.diag(D), rtol=1e-9)


def test_takahashi_on_dense_factor():
    A = random_spd(12, 0.5, 3).toarray()
    L = np.linalg.cholesky(A)
    S = takahashi(sp.csc_matrix(np.tril(L))).toarray()
    D = np.linalg.inv(A)
    assert np.allclose(np.tril(S), np.tril(D), atol=1e-12)


def test_solve_logdet_and_quadratic_forms():
    A = random_spd(40, 0.1, 7)
    F = Factor(A)
    Ad = A.toarray()
    b = np.arange(40.0)
    assert np.allclose(F.solve(b), np.linalg.solve(Ad, b))
    assert F.logdet() == pytest.approx(np.linalg.slogdet(Ad)[1], rel=1e-12)
    # each row touches a node and one of its neighbors, so every pair is adjacent
    rows = []
    for i in range(40):
        nb = [j for j in A[:, i].nonzero()[0] if j != i]
        r = np.zeros(40)
        r[i] = 0.3
        if nb:
            r[nb[0]] = 0.7
        rows.append(r)
    B = sp.csr_matrix(np.array(rows))
    D = np.linalg.inv(Ad)
    expect = np.einsum("ci,ij,cj->c", B.toarray(), D, B.toarray())
    assert np.allclose(F.quadratic_forms(B), expect, rtol=1e-9)


def test_solve_lt_gives_correct_covariance():
    A = random_spd(5, 0.6, 1)
    F = Factor(A)
    # solve_Lt maps white noise to N(0, A^-1): check the implied linear map
    M = np.column_stack([F.solve_Lt(e) for e in np.eye(5)])
    assert np.allclose(M @ M.T, np.linalg.inv(A.toarray()), atol=1e-12)
    W = np.column_stack([F.apply_L_inv(e) for e in np.eye(5)])
    assert np.allclose(W @ A.toarray() @ W.T, np.eye(5), atol=1e-10)


def test_not_positive_definite():
    with pytest.raises(NotPositiveDefinite):
        Factor(sp.csc_matrix(np.diag([1.0, -1.0, 2.0])))


def test_dense_fallback_agrees(monkeypatch):
    A = random_spd(30, 0.1, 11)
    sparse = Factor(A)
    monkeypatch.setattr(linalg, "HAVE_CHOLMOD", False)
    dense = Factor(A)
    assert dense._cm is None
    assert dense.logdet() == pytest.approx(sparse.logdet(), rel=1e-12)
    assert np.allclose(dense.inverse_diagonal(), sparse.inverse_diagonal())
    z = np.random.default_rng(0).standard_normal(30)
    x = dense.solve_Lt(z)
    # same distribution, not the same draw: check via the quadratic form
    assert x @ A @ x == pytest.approx(z @ z, rel=1e-9)
