"""A compact nested-Laplace engine for the latent Gaussian models in :mod:`model`.

For fixed hyperparameters the latent conditional is approximated by a
Gaussian at its mode (Newton-Raphson on a sparse Cholesky factor).  The
hyperparameter posterior is maximized with Nelder-Mead, explored on an
axis-aligned grid, and the conditional Gaussians are mixed with the grid
weights to give latent marginals and predictive maps.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import CubicSpline
from scipy.optimize import minimize
from scipy.special import ndtr

from .errors import BayesFeedError, EmptySample, HyperOptFailed, NewtonDiverged, NotPositiveDefinite
from .evaluate import PredictiveMap
from .linalg import Factor, symbolic
from .mesh import FemMatrices, Mesh, assemble_fem
from .model import ModelSpec, build_im, build_pm, build_pp, prediction_design
from .priors import PriorSet
from .spde import matern_params

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 50
GRID_POINTS = 5
GRID_STEP = 0.75
PRUNE_DROP = 5.0
NM_TOL = 1e-5
FD_STEP = 0.02
QUANTILES = (0.025, 0.5, 0.975)

# plausible box for the internal hyperparameters; the objective is +inf outside
_BOUNDS = {
    "log_rho": (math.log(0.005), math.log(20.0)),
    "log_sigma": (math.log(1e-3), math.log(50.0)),
    "log_phi": (math.log(1e-2), math.log(1e5)),
    "alpha": (-25.0, 25.0),
}

NATURAL = {"log_rho": "rho", "log_sigma": "sigma", "log_phi": "phi", "alpha": "alpha"}


@dataclass(eq=False)
class LaplaceResult:
    """Gaussian approximation of the latent conditional at one theta."""

    theta: np.ndarray
    mode: np.ndarray
    precision: sp.csc_matrix
    logdet: float
    loglik: float
    prior_quad: float
    prior_logdet: float
    factor: Factor = field(repr=False)
    iterations: int = 0
    grad_norm: float = 0.0
    boosted: bool = False

    @property
    def latent_log_prior(self) -> float:
        n = len(self.mode)
        return 0.5 * self.prior_logdet - 0.5 * self.prior_quad - 0.5 * n * math.log(2 * math.pi)


@dataclass(eq=False)
class IntegrationPoint:
    theta: np.ndarray
    weight: float
    mode: np.ndarray
    latent_sd: np.ndarray
    log_post: float
    precision: sp.csc_matrix | None = None
    pred_mean: np.ndarray | None = None
    pred_var: np.ndarray | None = None


@dataclass(eq=False)
class HyperMarginal:
    """Tabulated posterior marginal of one hyperparameter on its natural scale."""

    name: str
    values: np.ndarray
    density: np.ndarray
    support: np.ndarray
    support_mass: np.ndarray

    @property
    def n_support(self) -> int:
        return len(self.support)

    def _cdf(self):
        c = np.concatenate([[0.0], np.cumsum(0.5 * (self.density[1:] + self.density[:-1]) * np.diff(self.values))])
        return c / c[-1]

    def quantile(self, p: float) -> float:
        c = self._cdf()
        keep = np.concatenate([[True], np.diff(c) > 0])
        return float(np.interp(p, c[keep], self.values[keep]))

    @property
    def median(self) -> float:
        return self.quantile(0.5)

    def expect(self, fn=lambda v: v) -> float:
        return float(np.trapezoid(fn(self.values) * self.density, self.values) / np.trapezoid(self.density, self.values))

    @property
    def mean(self) -> float:
        return self.expect()

    @property
    def sd(self) -> float:
        m = self.mean
        return math.sqrt(max(self.expect(lambda v: (v - m) ** 2), 0.0))

    def log_moments(self) -> tuple[float, float]:
        """Mean and sd of log(value); only meaningful for positive hyperparameters."""
        m = self.expect(np.log)
        v = self.expect(lambda x: (np.log(x) - m) ** 2)
        return m, math.sqrt(max(v, 0.0))

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.values))

    def to_dict(self) -> dict:
        return {
            "values": self.values.tolist(),
            "density": self.density.tolist(),
            "support": self.support.tolist(),
            "support_mass": self.support_mass.tolist(),
        }

    @classmethod
    def from_dict(cls, name: str, d: dict) -> "HyperMarginal":
        return cls(
            name,
            np.asarray(d["values"], float),
            np.asarray(d["density"], float),
            np.asarray(d["support"], float),
            np.asarray(d["support_mass"], float),
        )


@dataclass(eq=False)
class FitResult:
    variant: str
    family: str
    latent_names: tuple
    mean: np.ndarray
    sd: np.ndarray
    quantiles: np.ndarray
    hyper: dict
    points: list
    theta_mode: np.ndarray
    theta_sd: np.ndarray
    hyper_names: tuple
    diagnostics: dict
    priors: PriorSet | None = None
    prediction: PredictiveMap | None = None

    def index(self, name: str) -> int:
        return self.latent_names.index(name)

    def summary(self, name: str) -> dict:
        i = self.index(name)
        q = self.quantiles[i]
        return {"mean": float(self.mean[i]), "sd": float(self.sd[i]), "q025": float(q[0]), "q50": float(q[1]), "q975": float(q[2])}

    @property
    def fixed_names(self) -> tuple:
        return tuple(n for n in self.latent_names if not n.startswith("u"))

    @property
    def robust(self) -> bool:
        return not self.diagnostics.get("robustness_flag", False)

    def compact(self) -> "FitResult":
        """Copy without integration points and without the spatial latent block."""
        keep = [self.index(n) for n in self.fixed_names]
        return replace(
            self,
            latent_names=self.fixed_names,
            mean=self.mean[keep],
            sd=self.sd[keep],
            quantiles=self.quantiles[keep],
            points=[],
        )

    def to_dict(self) -> dict:
        from .priors import prior_set_to_dict

        return {
            "variant": self.variant,
            "family": self.family,
            "fixed_effects": {n: self.summary(n) for n in self.fixed_names},
            "hyperparameters": {k: {"mean": v.mean, "sd": v.sd, "median": v.median, "n_support": v.n_support} for k, v in self.hyper.items()},
            "hyper_marginals": {k: v.to_dict() for k, v in self.hyper.items()},
            "theta_mode": dict(zip(self.hyper_names, map(float, self.theta_mode))),
            "theta_sd": dict(zip(self.hyper_names, map(float, self.theta_sd))),
            "integration_points": [
                {"theta": p.theta.tolist(), "weight": p.weight, "log_post": p.log_post} for p in self.points
            ],
            "diagnostics": self.diagnostics,
            "priors": prior_set_to_dict(self.priors) if self.priors is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        from .priors import prior_set_from_dict

        names = tuple(d["fixed_effects"])
        fe = d["fixed_effects"]
        return cls(
            variant=d["variant"],
            family=d["family"],
            latent_names=names,
            mean=np.array([fe[n]["mean"] for n in names]),
            sd=np.array([fe[n]["sd"] for n in names]),
            quantiles=np.array([[fe[n]["q025"], fe[n]["q50"], fe[n]["q975"]] for n in names]),
            hyper={k: HyperMarginal.from_dict(k, v) for k, v in d["hyper_marginals"].items()},
            points=[],
            theta_mode=np.array(list(d["theta_mode"].values())),
            theta_sd=np.array(list(d["theta_sd"].values())),
            hyper_names=tuple(d["theta_mode"]),
            diagnostics=d.get("diagnostics", {}),
            priors=prior_set_from_dict(d["priors"]) if d.get("priors") else None,
        )


# ---------------------------------------------------------------- engine


class _Engine:
    """Per-spec caches: aligned sparse patterns, symbolic factorizations, warm starts."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        n, nl = spec.n_nodes, spec.n_latent
        fem = spec.fem
        node = sp.coo_matrix(abs(fem.C) + abs(fem.G) + abs(fem.GCiG))
        self._q_rows = np.concatenate([node.row, np.arange(n, nl)])
        self._q_cols = np.concatenate([node.col, np.arange(n, nl)])
        self._c = np.asarray(fem.C.tocsr()[node.row, node.col]).ravel()
        self._g = np.asarray(fem.G.tocsr()[node.row, node.col]).ravel()
        self._k = np.asarray(fem.GCiG.tocsr()[node.row, node.col]).ravel()
        # Hessian curvature terms D^T W D as linear maps of w onto a fixed pattern;
        # a block with design F + alpha S contributes F'WF + alpha (F'WS + S'WF) + alpha^2 S'WS
        triples = []
        for bi, blk in enumerate(spec.blocks):
            parts = [(blk.fixed, blk.fixed, 0)]
            if blk.shared is not None:
                parts += [(blk.fixed, blk.shared, 1), (blk.shared, blk.fixed, 1), (blk.shared, blk.shared, 2)]
            for A, Bm, power in parts:
                triples.append((bi, power) + _outer_triples(A, Bm))
        all_r = np.concatenate([self._q_rows] + [t[2] for t in triples])
        all_c = np.concatenate([self._q_cols] + [t[3] for t in triples])
        P = sp.csc_matrix((np.ones(len(all_r)), (all_r, all_c)), shape=(nl, nl))
        P.sum_duplicates()
        P.sort_indices()
        self._indptr, self._indices = P.indptr, P.indices
        self._nnz = P.nnz
        self._shape = (nl, nl)
        self._qpos = self._locate(self._q_rows, self._q_cols)
        self._diagpos = self._locate(np.arange(nl), np.arange(nl))
        self._curv = []
        for bi, power, r, c, row, val in triples:
            M = sp.csr_matrix((val, (self._locate(r, c), row)), shape=(self._nnz, spec.blocks[bi].n_rows))
            self._curv.append((bi, power, M))
        # Qu = tau^2 K C^-1 K with K = kappa^2 C + G, so its log-determinant
        # only needs a factorization of the much sparser K
        self._kc = fem.C.diagonal()
        self._logdet_c = float(np.sum(np.log(self._kc)))
        self._G = fem.G.tocsc()
        self._G.sort_indices()
        self._k_symbolic = None
        self._h_symbolic = None
        self._h_pattern = None
        self.x_warm = None
        self.newton_iterations = []
        self.boosts = 0
        self.evaluations = 0

    def _locate(self, rows, cols) -> np.ndarray:
        """Storage positions of entries (rows, cols) in the fixed CSC pattern."""
        nl = self._shape[0]
        key_t = np.repeat(np.arange(nl, dtype=np.int64), np.diff(self._indptr)) * nl + self._indices
        return np.searchsorted(key_t, np.asarray(cols, np.int64) * nl + np.asarray(rows, np.int64))

    def _matrix(self, data) -> sp.csc_matrix:
        return sp.csc_matrix((data, self._indices, self._indptr), shape=self._shape)

    # -- latent prior ------------------------------------------------------
    def prior(self, theta):
        spec = self.spec
        p = matern_params(math.exp(theta[0]), math.exp(theta[1]))
        t2, k2 = p.tau**2, p.kappa**2
        vals = t2 * (k2 * k2 * self._c + 2.0 * k2 * self._g + self._k)
        fp = spec.fixed_priors()
        prec = np.array([q.precision for q in fp])
        data = np.zeros(self._nnz)
        np.add.at(data, self._qpos, np.concatenate([vals, prec]))
        mean = np.concatenate([np.zeros(spec.n_nodes), [q.mean for q in fp]])
        n = spec.n_nodes
        K = (self._G + sp.diags(k2 * self._kc)).tocsc()
        K.sort_indices()
        if self._k_symbolic is None:
            self._k_symbolic = symbolic(K)
        logdet_u = n * math.log(t2) + 2.0 * Factor(K, self._k_symbolic).logdet() - self._logdet_c
        logdet = logdet_u + float(np.sum(np.log(prec)))
        return data, mean, logdet

    # -- likelihood --------------------------------------------------------
    def _designs(self, theta):
        return [b.design(theta) for b in self.spec.blocks]

    def _lik(self, x, theta, designs):
        ll = 0.0
        grad = np.zeros_like(x)
        ws = []
        for b, D in zip(self.spec.blocks, designs):
            eta = D @ x
            l, g, w = b.terms(eta, theta)
            ll += l
            grad += D.T @ g
            ws.append(w)
        return ll, grad, ws

    def _hessian(self, q_data, theta, ws):
        data = q_data.copy()
        alpha = theta[3] if len(theta) > 3 else 1.0
        for bi, power, M in self._curv:
            data += alpha**power * (M @ ws[bi])
        return self._matrix(data)

    def _factor(self, H):
        if self._h_pattern is None or not (
            np.array_equal(self._h_pattern[0], H.indptr) and np.array_equal(self._h_pattern[1], H.indices)
        ):
            self._h_symbolic = symbolic(H)
            self._h_pattern = (H.indptr.copy(), H.indices.copy())
        try:
            return Factor(H, self._h_symbolic), False
        except NotPositiveDefinite:
            pass
        # Levenberg-style diagonal boost
        lam = 1e-8 * float(abs(H.diagonal()).max() or 1.0)
        for _ in range(12):
            try:
                self.boosts += 1
                Hb = H.copy()
                Hb.data[self._diagpos] += lam
                return Factor(Hb, self._h_symbolic), True
            except NotPositiveDefinite:
                lam *= 10.0
        raise NotPositiveDefinite("latent Hessian not positive definite after diagonal boosting")

    def laplace(self, theta, x0=None, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER) -> LaplaceResult:
        theta = np.asarray(theta, dtype=float)
        q_data, m0, prior_logdet = self.prior(theta)
        Q = self._matrix(q_data)
        ds = self._designs(theta)
        x = m0.copy() if x0 is None else np.array(x0, dtype=float)

        def objective(xx):
            ll, g, w = self._lik(xx, theta, ds)
            r = xx - m0
            Qr = Q @ r
            quad = float(r @ Qr)
            return ll - 0.5 * quad, ll, quad, g - Qr, w

        f, ll, quad, grad, ws = objective(x)
        trace = []
        boosted = False
        converged = False
        it = 0
        for it in range(max_iter + 1):
            gnorm = float(np.max(np.abs(grad))) if len(grad) else 0.0
            trace.append((it, f, gnorm))
            if not np.isfinite(f):
                raise NewtonDiverged(f"non-finite objective at theta={theta}", trace)
            if gnorm < tol:
                converged = True
                break
            if it == max_iter:
                break
            H = self._hessian(q_data, theta, ws)
            F, b = self._factor(H)
            boosted |= b
            step = F.solve(grad)
            dec = float(step @ grad)
            if dec < 1e-18 * max(1.0, abs(f)) and gnorm < 1e-5:
                converged = True  # roundoff floor
                break
            t = 1.0
            while True:
                fn, lln, quadn, gn, wn = objective(x + t * step)
                if np.isfinite(fn) and fn >= f - 1e-12 * (1.0 + abs(f)):
                    break
                t *= 0.5
                if t < 1e-10:
                    raise NewtonDiverged(f"line search failed at theta={theta}", trace)
            x = x + t * step
            f, ll, quad, grad, ws = fn, lln, quadn, gn, wn
        if not converged:
            raise NewtonDiverged(f"Newton did not converge in {max_iter} iterations at theta={theta}", trace)
        H = self._hessian(q_data, theta, ws)
        F, b = self._factor(H)
        boosted |= b
        self.newton_iterations.append(it)
        return LaplaceResult(
            theta=theta,
            mode=x,
            precision=H,
            logdet=F.logdet(),
            loglik=ll,
            prior_quad=quad,
            prior_logdet=prior_logdet,
            factor=F,
            iterations=it,
            grad_norm=trace[-1][2],
            boosted=boosted,
        )

    def log_post(self, theta, warm=True) -> tuple[float, LaplaceResult]:
        self.evaluations += 1
        la = self.laplace(theta, self.x_warm if warm else None)
        if warm:
            self.x_warm = la.mode
        lp = la.loglik + 0.5 * la.prior_logdet - 0.5 * la.prior_quad - 0.5 * la.logdet + self.spec.log_prior_hyper(theta)
        return float(lp), la


def _outer_triples(A: sp.csr_matrix, B: sp.csr_matrix):
    """Entries of A' diag(w) B as (row, col, w-index, coefficient) quadruples."""
    A = sp.csr_matrix(A)
    B = sp.csr_matrix(B)
    A.sum_duplicates()
    B.sum_duplicates()
    ra = np.repeat(np.arange(A.shape[0]), np.diff(A.indptr))
    rb = np.repeat(np.arange(B.shape[0]), np.diff(B.indptr))
    # pair every nonzero of row c in A with every nonzero of row c in B
    order_b = np.argsort(rb, kind="stable")
    starts = np.searchsorted(rb[order_b], ra, side="left")
    stops = np.searchsorted(rb[order_b], ra, side="right")
    counts = stops - starts
    ia = np.repeat(np.arange(len(ra)), counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    ib = order_b[np.repeat(starts, counts) + offs]
    return A.indices[ia], B.indices[ib], ra[ia], A.data[ia] * B.data[ib]


def _engine(spec: ModelSpec) -> _Engine:
    eng = spec.meta.get("_engine")
    if eng is None:
        eng = _Engine(spec)
        spec.meta["_engine"] = eng
    return eng


def gaussian_approx(spec: ModelSpec, theta, x0=None) -> LaplaceResult:
    """Gaussian approximation of p(x | y, theta) at its mode."""
    return _engine(spec).laplace(theta, x0)


def log_posterior_hyper(spec: ModelSpec, theta) -> float:
    """Laplace approximation of log p(theta | y) up to an additive constant."""
    lp, _ = _engine(spec).log_post(np.asarray(theta, dtype=float), warm=False)
    return lp


# ------------------------------------------------------------- exploration


def _in_bounds(spec, theta) -> bool:
    for name, v in zip(spec.hyper_names, theta):
        lo, hi = _BOUNDS[name]
        if not lo <= v <= hi:
            return False
    return True


def initial_theta(spec: ModelSpec) -> np.ndarray:
    """Start at prior medians for the field; phi from the log-response spread."""
    s = spec.priors.spatial
    if s.family == "PC" or s.family == "EN":
        rho0 = s.rho0 * (math.exp(s.mu2) if s.family == "EN" else 1.0)
        sig0 = s.sigma0 * (math.exp(s.mu1) if s.family == "EN" else 1.0)
    else:
        rho0, sig0 = float(s.rho.quantile(0.5)), float(s.sigma.quantile(0.5))
    theta = [math.log(rho0), math.log(sig0)]
    if spec.variant in ("IM", "PM"):
        y = spec.blocks[0].data["y"]
        if spec.obs_family == "gamma" and len(y) > 2:
            phi0 = 1.0 / max(float(np.var(np.log(y))) * 0.5, 0.02)
        else:
            phi0 = 1.0 / max(float(np.var(y)) * 0.5, 0.02) if len(y) > 2 else 1.0
        theta.append(math.log(min(max(phi0, 0.1), 1e3)))
    if spec.variant == "PM":
        theta.append(1.0)
    return np.array(theta)


def _fd_hessian(f, x, h):
    d = len(x)
    H = np.zeros((d, d))
    f0 = f(x)
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        fp, fm = f(x + e), f(x - e)
        H[i, i] = (fp - 2 * f0 + fm) / h**2
        for j in range(i):
            e2 = np.zeros(d)
            e2[j] = h
            H[i, j] = H[j, i] = (f(x + e + e2) - f(x + e - e2) - f(x - e + e2) + f(x - e - e2)) / (4 * h * h)
    return H


@dataclass(eq=False)
class Exploration:
    points: list
    theta_mode: np.ndarray
    theta_sd: np.ndarray
    hessian: np.ndarray
    lp_mode: float
    grid_values: list
    diagnostics: dict


def find_mode(spec: ModelSpec, theta0=None, restarts: int = 3):
    """Nelder-Mead on the negative log hyper-posterior."""
    eng = _engine(spec)

    def negf(t):
        if not _in_bounds(spec, t):
            return 1e300
        try:
            lp, _ = eng.log_post(t)
        except (BayesFeedError, np.linalg.LinAlgError, FloatingPointError, ValueError):
            eng.x_warm = None
            return 1e300
        return -lp if np.isfinite(lp) else 1e300

    start = np.asarray(theta0 if theta0 is not None else initial_theta(spec), dtype=float)
    rng = np.random.default_rng(12345)
    best = None
    n_restarts = 0
    for attempt in range(restarts + 1):
        x0 = start if attempt == 0 else start + rng.normal(scale=0.5, size=len(start))
        if attempt:
            n_restarts += 1
            eng.x_warm = None
        res = minimize(negf, x0, method="Nelder-Mead", options={"xatol": NM_TOL, "fatol": NM_TOL, "maxiter": 4000, "maxfev": 8000, "adaptive": len(start) > 2})
        # polish from the optimum with a fresh, smaller simplex
        sim = np.vstack([res.x] + [res.x + 0.05 * np.eye(len(start))[k] for k in range(len(start))])
        res2 = minimize(negf, res.x, method="Nelder-Mead", options={"xatol": NM_TOL, "fatol": NM_TOL, "maxiter": 4000, "initial_simplex": sim})
        if res2.fun <= res.fun:
            res = res2
        if res.fun < 1e299 and (best is None or res.fun < best.fun):
            best = res
        if best is not None and best.fun < 1e299:
            break
    if best is None:
        raise HyperOptFailed(f"hyperparameter optimization failed after {restarts} restarts")
    return best.x, -best.fun, n_restarts, negf


def explore_hyper(spec: ModelSpec, theta0=None, keep_precision: bool = False, design=None) -> Exploration:
    """Mode search, finite-difference curvature and a pruned 5-per-axis grid.

    With ``design`` given, each retained point also stores the mean and
    variance of ``design @ x`` so prediction needs no second pass.
    """
    eng = _engine(spec)
    mode, lp_mode, n_restarts, negf = find_mode(spec, theta0)
    d = len(mode)

    def f(t):
        v = negf(t)
        return -v if v < 1e299 else -1e12

    H = _fd_hessian(f, mode, FD_STEP)
    negH = -H
    try:
        cov = np.linalg.inv(negH)
        sd = np.sqrt(np.diag(cov))
        if not np.all(np.isfinite(sd)) or np.any(np.diag(cov) <= 0) or np.any(np.linalg.eigvalsh(negH) <= 0):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        diag = np.diag(negH)
        sd = np.where(diag > 0, 1.0 / np.sqrt(np.abs(diag) + 1e-300), 1.0)
    sd = np.clip(sd, 1e-4, 5.0)

    offsets = (np.arange(GRID_POINTS) - GRID_POINTS // 2) * GRID_STEP
    grids = [mode[k] + offsets * sd[k] for k in range(d)]
    mesh_idx = np.stack(np.meshgrid(*[np.arange(GRID_POINTS)] * d, indexing="ij"), -1).reshape(-1, d)
    # visit points nearest the mode first so warm starts stay close
    mesh_idx = mesh_idx[np.argsort(np.abs(mesh_idx - GRID_POINTS // 2).sum(1), kind="stable")]

    raw = []
    eng.x_warm = None
    la_mode = None
    for idx in mesh_idx:
        theta = np.array([grids[k][idx[k]] for k in range(d)])
        if not _in_bounds(spec, theta):
            continue
        try:
            x0 = la_mode.mode if la_mode is not None else None
            la = eng.laplace(theta, x0)
            lp = la.loglik + 0.5 * la.prior_logdet - 0.5 * la.prior_quad - 0.5 * la.logdet + spec.log_prior_hyper(theta)
        except (BayesFeedError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            log.debug("grid point %s skipped: %s", theta, exc)
            continue
        if la_mode is None:
            la_mode = la
        if not np.isfinite(lp) or lp < lp_mode - PRUNE_DROP:
            continue
        var = la.factor.inverse_diagonal()
        pm = pv = None
        if design is not None:
            pm, pv = _predict_moments(la, design, spec.n_nodes)
        raw.append((theta, idx, lp, la.mode, np.sqrt(np.maximum(var, 0.0)), la.precision if keep_precision else None, pm, pv))
    if not raw:
        raise HyperOptFailed("no grid point survived exploration")
    lps = np.array([r[2] for r in raw])
    top = lps.max()
    w = np.exp(lps - top)
    w /= w.sum()
    points = [IntegrationPoint(r[0], float(wi), r[3], r[4], float(r[2]), r[5], r[6], r[7]) for r, wi in zip(raw, w)]
    diag = {
        "nm_evaluations": eng.evaluations,
        "hyper_restarts": n_restarts,
        "newton_iterations_max": int(max(eng.newton_iterations or [0])),
        "newton_iterations_total": int(sum(eng.newton_iterations)),
        "newton_boosts": eng.boosts,
        "n_points": len(points),
        "lp_mode": lp_mode,
    }
    return Exploration(points, mode, sd, H, lp_mode, grids, diag)


# ------------------------------------------------------------- marginals


def mixture_cdf(x, means, sds, weights):
    """CDF of Gaussian mixtures; means/sds are (points, components), x is (components,)."""
    z = (x[None, :] - means) / sds
    return weights @ ndtr(z)


def mixture_quantile(p, means, sds, weights, iters: int = 48):
    means = np.atleast_2d(means)
    sds = np.maximum(np.atleast_2d(sds), 1e-300)
    weights = np.asarray(weights, dtype=float)
    lo = (means - 9.0 * sds).min(0)
    hi = (means + 9.0 * sds).max(0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = mixture_cdf(mid, means, sds, weights) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def latent_marginals(points, quantiles=QUANTILES):
    """Gaussian-mixture mean, sd and quantiles of every latent component."""
    w = np.array([p.weight for p in points])
    w = w / w.sum()
    M = np.array([p.mode for p in points])
    S = np.array([p.latent_sd for p in points])
    mean = w @ M
    var = w @ (S**2 + M**2) - mean**2
    sd = np.sqrt(np.maximum(var, 0.0))
    keep = w > 1e-12 * w.max()
    q = np.column_stack([mixture_quantile(pp, M[keep], S[keep], w[keep] / w[keep].sum()) for pp in quantiles])
    return mean, sd, q


def _marginal_1d(values, logmass, mode, sd, natural: str, n_fine: int = 161) -> tuple[np.ndarray, np.ndarray]:
    """Smooth internal-scale log marginal from grid masses, mapped to the natural scale."""
    values = np.asarray(values, float)
    logmass = np.asarray(logmass, float)
    lo, hi = mode - 4.0 * sd, mode + 4.0 * sd
    fine = np.linspace(lo, hi, n_fine)
    if len(values) >= 3:
        c2, c1, c0 = np.polyfit(values - mode, logmass, 2)
    else:
        c2, c1, c0 = -0.5 / sd**2, 0.0, float(np.max(logmass))
    if c2 >= 0:
        c2 = -0.5 / sd**2
    quad = lambda t: c0 + c1 * (t - mode) + c2 * (t - mode) ** 2
    ld = quad(fine)
    if len(values) >= 3:
        spline = CubicSpline(values, logmass, bc_type="natural")
        inside = (fine >= values[0]) & (fine <= values[-1])
        ld[inside] = spline(fine[inside])
        # continue the tails from the spline end values with the quadratic curvature
        for end, sign in ((values[0], -1), (values[-1], 1)):
            tail = (fine < end) if sign < 0 else (fine > end)
            v_end = float(spline(end))
            slope = c1 + 2 * c2 * (end - mode)
            if sign * slope > 0:
                slope = 0.0
            dt = fine[tail] - end
            ld[tail] = v_end + slope * dt + c2 * dt**2
    ld -= ld.max()
    dens = np.exp(ld)
    if natural == "alpha":
        x = fine
    else:
        x = np.exp(fine)
        dens = dens / x
    dens = dens / np.trapezoid(dens, x)
    return x, dens


def hyper_marginals(expl: Exploration, names) -> dict:
    pts = expl.points
    thetas = np.array([p.theta for p in pts])
    w = np.array([p.weight for p in pts])
    out = {}
    for k, name in enumerate(names):
        grid = expl.grid_values[k]
        masses = np.array([w[np.isclose(thetas[:, k], g, rtol=0, atol=1e-12)].sum() for g in grid])
        present = masses > 0
        vals = grid[present]
        lm = np.log(masses[present])
        nat = NATURAL[name]
        x, dens = _marginal_1d(vals, lm, expl.theta_mode[k], expl.theta_sd[k], nat)
        support = vals if nat == "alpha" else np.exp(vals)
        out[nat] = HyperMarginal(nat, x, dens, support, masses[present])
    return out


# --------------------------------------------------------------- prediction


def _predict_moments(la: LaplaceResult, B: sp.csr_matrix, n_nodes: int):
    """Mean and variance of ``B x`` under the Gaussian approximation ``la``."""
    F = la.factor
    nl = len(la.mode)
    nf = nl - n_nodes
    mean = B @ la.mode
    E = np.zeros((nl, nf))
    E[np.arange(n_nodes, nl), np.arange(nf)] = 1.0
    Sf = F.solve(E)
    Bu = B[:, :n_nodes]
    Bf = B[:, n_nodes:].toarray()
    Bu_full = sp.hstack([Bu, sp.csr_matrix((B.shape[0], nf))], format="csr")
    var_u = F.quadratic_forms(Bu_full)
    cross = np.asarray(Bu @ Sf[:n_nodes]).reshape(B.shape[0], -1)
    var = var_u + 2.0 * np.sum(cross * Bf, axis=1) + np.einsum("ci,ij,cj->c", Bf, Sf[n_nodes:], Bf)
    return mean, np.maximum(var, 0.0)


def _mix_prediction(points) -> PredictiveMap:
    w = np.array([p.weight for p in points])
    keep = np.flatnonzero(w > 1e-12 * w.max())
    w = w[keep] / w[keep].sum()
    M = np.array([points[i].pred_mean for i in keep])
    V = np.array([points[i].pred_var for i in keep])
    mean_pred = w @ np.exp(M + 0.5 * V)
    eta_mean = w @ M
    eta_sd = np.sqrt(np.maximum(w @ (V + M**2) - eta_mean**2, 0.0))
    med = mixture_quantile(0.5, M, np.sqrt(V), w)
    return PredictiveMap(mean=mean_pred, median=np.exp(med), eta_mean=eta_mean, eta_sd=eta_sd)


def predictive_map(eng: _Engine, points, B: sp.csr_matrix) -> PredictiveMap:
    """Mixture predictive of ``exp(B x)`` over integration points."""
    pts = []
    for p in points:
        la = eng.laplace(p.theta, p.mode)
        m, v = _predict_moments(la, B, eng.spec.n_nodes)
        pts.append(replace(p, pred_mean=m, pred_var=v))
    return _mix_prediction(pts)


def predict(fit: FitResult, spec: ModelSpec, locations, covariate=None) -> PredictiveMap:
    """Posterior predictive of the response mean at ``locations`` (e.g. raster cell centers)."""
    if not fit.points:
        raise ValueError("fit has no integration points; pass a full FitResult")
    B = prediction_design(spec, locations, covariate)
    return predictive_map(_engine(spec), fit.points, B)


# ------------------------------------------------------------------- fits


def fit_spec(spec: ModelSpec, predict_at=None, theta0=None) -> FitResult:
    t0 = time.perf_counter()
    B = None
    if predict_at is not None:
        locs, cov = predict_at if isinstance(predict_at, tuple) else (predict_at, None)
        B = prediction_design(spec, locs, cov)
    expl = explore_hyper(spec, theta0, design=B)
    mean, sd, q = latent_marginals(expl.points)
    hyper = hyper_marginals(expl, spec.hyper_names)
    diag = dict(expl.diagnostics)
    diag["robustness_flag"] = bool(diag["hyper_restarts"] > 0 or diag["newton_boosts"] > 0)
    prediction = _mix_prediction(expl.points) if B is not None else None
    diag["seconds"] = time.perf_counter() - t0
    return FitResult(
        variant=spec.variant,
        family=spec.priors.family,
        latent_names=spec.latent_names,
        mean=mean,
        sd=sd,
        quantiles=q,
        hyper=hyper,
        points=expl.points,
        theta_mode=expl.theta_mode,
        theta_sd=expl.theta_sd,
        hyper_names=spec.hyper_names,
        diagnostics=diag,
        priors=spec.priors,
        prediction=prediction,
    )


def _prepare(sample, mesh: Mesh, fem: FemMatrices | None):
    if sample is None or sample.n == 0:
        raise EmptySample("cannot fit a model to an empty sample")
    return fem if fem is not None else assemble_fem(mesh)


def fit_im(sample, mesh: Mesh, priors: PriorSet, fem: FemMatrices | None = None, predict_at=None) -> FitResult:
    fem = _prepare(sample, mesh, fem)
    return fit_spec(build_im(sample, mesh, priors, fem), predict_at)


def fit_pm(sample, mesh: Mesh, priors: PriorSet, fem: FemMatrices | None = None, predict_at=None) -> FitResult:
    fem = _prepare(sample, mesh, fem)
    return fit_spec(build_pm(sample, mesh, priors, fem), predict_at)


def fit_pp(sample, mesh: Mesh, priors: PriorSet, fem: FemMatrices | None = None, pp_covariate: bool = True) -> FitResult:
    fem = _prepare(sample, mesh, fem)
    return fit_spec(build_pp(sample, mesh, priors, fem, pp_covariate=pp_covariate))
