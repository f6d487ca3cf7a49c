"""Sparse Cholesky factorization with a dense LAPACK fallback.

CHOLMOD (via scikit-sparse) is used when importable; otherwise every
operation runs on dense arrays.  Both paths expose the same small surface:
``solve``, ``logdet``, ``solve_Lt`` (for sampling) and ``selected_inverse``.
"""

from __future__ import annotations

import os

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import NotPositiveDefinite

try:  # pragma: no cover - exercised implicitly
    if os.environ.get("BAYESFEED_DENSE"):
        raise ImportError
    from sksparse.cholmod import CholmodNotPositiveDefiniteError, analyze as _cm_analyze
    from sksparse.cholmod import cholesky as _cm_cholesky

    HAVE_CHOLMOD = True
except ImportError:  # pragma: no cover
    HAVE_CHOLMOD = False

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None


def _takahashi_py(indptr, indices, data, out):
    n = len(indptr) - 1
    mmax = 1
    for i in range(n):
        mmax = max(mmax, indptr[i + 1] - indptr[i] - 1)
    Z = np.zeros((mmax, mmax))
    for i in range(n - 1, -1, -1):
        start, stop = indptr[i], indptr[i + 1]
        lii = data[start]
        m = stop - start - 1
        # Z[b, c] = S[r_c, r_b] (c >= b), gathered by merging sorted row lists
        for b in range(m):
            col = indices[start + 1 + b]
            p, pend = indptr[col], indptr[col + 1]
            for c in range(b, m):
                rc = indices[start + 1 + c]
                while p < pend and indices[p] < rc:
                    p += 1
                v = out[p] if p < pend and indices[p] == rc else 0.0
                Z[b, c] = v
                Z[c, b] = v
        acc_diag = 0.0
        for a in range(m):
            s = 0.0
            for b in range(m):
                s += data[start + 1 + b] * Z[b, a]
            val = -s / lii
            out[start + 1 + a] = val
            acc_diag += data[start + 1 + a] * val
        out[start] = 1.0 / (lii * lii) - acc_diag / lii


if njit is not None:
    _takahashi = njit(cache=True)(_takahashi_py)
else:  # pragma: no cover
    _takahashi = _takahashi_py


def takahashi(L: sp.csc_matrix) -> sp.csc_matrix:
    """Entries of ``(L L^T)^{-1}`` on the lower-triangular pattern of ``L``.

    ``L`` must be lower-triangular CSC with sorted indices.  The pattern of a
    Cholesky factor is closed under the recursion, so no other entries are
    needed.
    """
    L = L.tocsc()
    L.sort_indices()
    indptr = L.indptr.astype(np.int64)
    indices = L.indices.astype(np.int64)
    data = L.data.astype(float)
    out = np.zeros_like(data)
    _takahashi(indptr, indices, data, out)
    if not np.all(np.isfinite(out)):
        raise NotPositiveDefinite("selected inverse produced non-finite entries")
    return sp.csc_matrix((out, indices, indptr), shape=L.shape)


class Factor:
    """Cholesky factor of a symmetric positive definite matrix ``A``."""

    def __init__(self, A, symbolic=None):
        A = sp.csc_matrix(A)
        self.n = A.shape[0]
        self._dense = None
        self._cm = None
        self._sinv = None
        if HAVE_CHOLMOD:
            # supernodal LL' fails loudly on indefinite input; simplicial LDL' would not
            try:
                if symbolic is not None:
                    try:
                        self._cm = symbolic.cholesky(A)
                    except CholmodNotPositiveDefiniteError:
                        raise
                    except Exception:
                        self._cm = _cm_cholesky(A, mode="supernodal")
                else:
                    self._cm = _cm_cholesky(A, mode="supernodal")
            except CholmodNotPositiveDefiniteError as exc:
                raise NotPositiveDefinite(str(exc)) from exc
        else:
            try:
                self._dense = sla.cholesky(A.toarray(), lower=True)
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefinite(str(exc)) from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self._cm is not None:
            return self._cm(b)
        return sla.cho_solve((self._dense, True), b)

    def logdet(self) -> float:
        if self._cm is not None:
            return float(self._cm.logdet())
        return 2.0 * float(np.sum(np.log(np.diag(self._dense))))

    def solve_Lt(self, z: np.ndarray) -> np.ndarray:
        """Return ``x`` with ``L^T x = z`` mapped back to the original ordering.

        For standard-normal ``z`` the result has covariance ``A^{-1}``.
        """
        if self._cm is not None:
            y = self._cm.solve_Lt(z, use_LDLt_decomposition=False)
            return self._cm.apply_Pt(y)
        return sla.solve_triangular(self._dense.T, z, lower=False)

    def apply_L_inv(self, b: np.ndarray) -> np.ndarray:
        """Whitening map: ``L^{-1} P b``; covariance ``A^{-1}`` becomes the identity."""
        if self._cm is not None:
            return self._cm.solve_L(self._cm.apply_P(b), use_LDLt_decomposition=False)
        return sla.solve_triangular(self._dense, b, lower=True)

    def selected_inverse_lower(self) -> tuple[sp.csc_matrix, np.ndarray]:
        """Lower triangle of ``A^{-1}`` on the factor pattern, in factor ordering.

        Entry ``(a, b)`` of the result is entry ``(perm[a], perm[b])`` of ``A^{-1}``.
        """
        if self._sinv is None:
            if self._cm is not None:
                self._sinv = takahashi(self._cm.L()), np.asarray(self._cm.P())
            else:
                Linv = sla.solve_triangular(self._dense, np.eye(self.n), lower=True)
                self._sinv = sp.csc_matrix(np.tril(Linv.T @ Linv)), np.arange(self.n)
        return self._sinv

    def selected_inverse(self) -> sp.csc_matrix:
        """Symmetric sparse matrix holding ``A^{-1}`` on (at least) the pattern of ``A``."""
        S, perm = self.selected_inverse_lower()
        full = S + sp.triu(S.T, k=1)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return full[inv][:, inv].tocsc()

    def inverse_diagonal(self) -> np.ndarray:
        S, perm = self.selected_inverse_lower()
        out = np.empty(self.n)
        out[perm] = S.diagonal()
        return out

    def quadratic_forms(self, B) -> np.ndarray:
        """Row-wise ``b A^{-1} b^T`` for rows of ``B`` whose nonzeros are mutually adjacent in ``A``."""
        S, perm = self.selected_inverse_lower()
        Bp = sp.csr_matrix(B)[:, perm]
        d = S.diagonal()
        off = np.asarray((Bp @ S).multiply(Bp).sum(axis=1)).ravel()
        diag = np.asarray(Bp.multiply(Bp) @ d).ravel()
        return 2.0 * off - diag


def symbolic(A):
    """Reusable symbolic analysis (CHOLMOD only); ``None`` on the dense path."""
    if HAVE_CHOLMOD:
        return _cm_analyze(sp.csc_matrix(A), mode="supernodal")
    return None
