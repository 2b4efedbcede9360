"""Generalized estimating equations with moment-updated working correlation.

The solver alternates Fisher-scoring updates of the regression
coefficients with moment updates of the working correlation and
dispersion, and reports both model-based and robust covariances. The
robust bread is the exact Jacobian of the estimating function with the
working covariance matrices frozen at the solution (including the
second-derivative-of-the-mean term), which is what downstream stacked
variance estimation differentiates against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import expit

from .errors import (
    InsufficientPairs,
    QuadratureFailure,
    RankDeficientDesign,
    SeparationSuspected,
)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
SEPARATION_ETA = 30.0
SEPARATION_SHARE = 0.10
RHO_CLIP = 0.99
_VAR_FLOOR = 1e-10


# ---------------------------------------------------------------------------
# links and variance functions

@dataclass(frozen=True)
class Link:
    """Inverse-link bundle: mean, and its first two eta-derivatives."""

    name: str
    inverse: Callable[[np.ndarray], np.ndarray]
    inverse_deriv: Callable[[np.ndarray], np.ndarray]
    inverse_deriv2: Callable[[np.ndarray], np.ndarray]
    transform: Callable[[float], float]

    @classmethod
    def identity(cls) -> "Link":
        return cls(
            "identity",
            inverse=lambda eta: eta,
            inverse_deriv=lambda eta: np.ones_like(eta),
            inverse_deriv2=lambda eta: np.zeros_like(eta),
            transform=lambda mu: mu,
        )

    @classmethod
    def logit(cls) -> "Link":
        def d1(eta):
            p = expit(eta)
            return p * (1.0 - p)

        def d2(eta):
            p = expit(eta)
            return p * (1.0 - p) * (1.0 - 2.0 * p)

        return cls(
            "logit",
            inverse=expit,
            inverse_deriv=d1,
            inverse_deriv2=d2,
            transform=lambda mu: np.log(mu / (1.0 - mu)),
        )

    @classmethod
    def log(cls) -> "Link":
        return cls(
            "log",
            inverse=np.exp,
            inverse_deriv=np.exp,
            inverse_deriv2=np.exp,
            transform=np.log,
        )

    @classmethod
    def by_name(cls, name: str) -> "Link":
        try:
            return {"identity": cls.identity, "logit": cls.logit, "log": cls.log}[name]()
        except KeyError:
            raise ValueError(f"unknown link {name!r}") from None


def variance_function(kind: str) -> Callable[[np.ndarray], np.ndarray]:
    """Variance as a function of the mean: 'binomial' or 'gaussian'."""
    if kind == "binomial":
        return lambda mu: np.clip(mu, 1e-10, 1.0 - 1e-10) * (1.0 - np.clip(mu, 1e-10, 1.0 - 1e-10))
    if kind == "gaussian":
        return lambda mu: np.ones_like(mu)
    raise ValueError(f"unknown variance function {kind!r}")


# ---------------------------------------------------------------------------
# working correlation

@dataclass(frozen=True)
class WorkingCorrelation:
    """Working correlation structure, optionally with a fixed parameter.

    ``rho=None`` means the parameter is moment-estimated during the fit;
    a float (or a full matrix for ``unstructured``) pins it.
    """

    kind: str
    rho: object = None

    _KINDS = ("independence", "exchangeable", "ar1", "unstructured")

    def __post_init__(self) -> None:
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown working correlation {self.kind!r}")

    @classmethod
    def independence(cls) -> "WorkingCorrelation":
        return cls("independence")

    @classmethod
    def exchangeable(cls, rho: float | None = None) -> "WorkingCorrelation":
        return cls("exchangeable", rho)

    @classmethod
    def ar1(cls, rho: float | None = None) -> "WorkingCorrelation":
        return cls("ar1", rho)

    @classmethod
    def unstructured(cls, matrix: np.ndarray | None = None) -> "WorkingCorrelation":
        return cls("unstructured", matrix)

    def matrix(self, m: int, rho) -> np.ndarray:
        if m == 1:
            return np.eye(1)
        if self.kind == "independence":
            return np.eye(m)
        if self.kind == "exchangeable":
            return np.full((m, m), rho) + (1.0 - rho) * np.eye(m)
        if self.kind == "ar1":
            idx = np.arange(m)
            return rho ** np.abs(idx[:, None] - idx[None, :])
        return np.asarray(rho)[:m, :m]


def estimate_rho(residuals: list[np.ndarray], kind: str):
    """Moment estimate of the working-correlation parameter.

    ``residuals`` are standardized per-subject residual vectors. AR(1)
    uses the average of adjacent products, exchangeable the average over
    all within-subject pairs, unstructured per-position-pair averages
    (positions never jointly observed get 0). Scalar estimates are
    clipped to [-0.99, 0.99].

    Raises
    ------
    InsufficientPairs
        If no subject contributes at least two points.
    """
    if kind == "independence":
        return 0.0
    if kind in ("ar1", "exchangeable"):
        total, count = 0.0, 0
        for e in residuals:
            m = e.shape[0]
            if m < 2:
                continue
            if kind == "ar1":
                total += float(e[:-1] @ e[1:])
                count += m - 1
            else:
                s = e.sum()
                total += 0.5 * float(s * s - e @ e)
                count += m * (m - 1) // 2
        if count == 0:
            raise InsufficientPairs("no subject has two or more points")
        return float(np.clip(total / count, -RHO_CLIP, RHO_CLIP))
    if kind == "unstructured":
        mmax = max(e.shape[0] for e in residuals)
        if mmax < 2:
            raise InsufficientPairs("no subject has two or more points")
        sums = np.zeros((mmax, mmax))
        counts = np.zeros((mmax, mmax))
        for e in residuals:
            m = e.shape[0]
            sums[:m, :m] += np.outer(e, e)
            counts[:m, :m] += 1.0
        np.fill_diagonal(counts, 1.0)  # avoid 0/0; diag overwritten below
        with np.errstate(invalid="ignore"):
            r = np.where(counts > 0, sums / counts, 0.0)
        r = np.clip(r, -RHO_CLIP, RHO_CLIP)
        np.fill_diagonal(r, 1.0)
        return r
    raise ValueError(f"unknown working correlation {kind!r}")


# ---------------------------------------------------------------------------
# fit result

class SubjectWork(NamedTuple):
    """Per-subject pieces frozen at the solution, for downstream stacking."""

    X: np.ndarray
    y: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    dmu: np.ndarray
    d2mu: np.ndarray
    resid: np.ndarray
    siginv: np.ndarray


@dataclass
class GeeFit:
    """Solution of one GEE.

    ``scores`` holds per-subject estimating-function contributions and
    ``bread`` their summed exact Jacobian, both with the working
    covariance frozen at the solution; ``cov_robust`` is the sandwich
    built from them and ``cov_model`` the inverse expected information.
    """

    beta: np.ndarray
    cov_model: np.ndarray
    cov_robust: np.ndarray
    rho: object
    phi: float
    n_iter: int
    converged: bool
    scores: np.ndarray
    bread: np.ndarray
    workspace: list[SubjectWork] = field(repr=False, default_factory=list)

    @property
    def se_robust(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_robust))


# ---------------------------------------------------------------------------
# solver internals

class _Groups:
    """Panels grouped by length so per-iteration work is vectorized."""

    def __init__(self, panels):
        if not panels:
            raise ValueError("at least one panel is required")
        self.by_len: dict[int, tuple[np.ndarray, np.ndarray, list[int]]] = {}
        buckets: dict[int, tuple[list, list, list]] = {}
        for idx, (X, y) in enumerate(panels):
            X = np.asarray(X, dtype=float)
            y = np.asarray(y, dtype=float)
            if X.ndim != 2 or X.shape[0] != y.shape[0]:
                raise ValueError(f"panel {idx}: X {X.shape} incompatible with y {y.shape}")
            xs, ys, ids = buckets.setdefault(X.shape[0], ([], [], []))
            xs.append(X)
            ys.append(y)
            ids.append(idx)
        for m, (xs, ys, ids) in buckets.items():
            self.by_len[m] = (np.stack(xs), np.stack(ys), ids)
        self.n_subjects = len(panels)
        self.n_points = sum(m * arr[0].shape[0] for m, arr in self.by_len.items())
        self.k = next(iter(self.by_len.values()))[0].shape[2]


def _check_separation(link_name: str, eta_blocks: list[np.ndarray], n_points: int) -> None:
    if link_name == "identity":
        return
    extreme = sum(int(np.sum(np.abs(b) > SEPARATION_ETA)) for b in eta_blocks)
    if extreme >= SEPARATION_SHARE * n_points and extreme > 0:
        raise SeparationSuspected(
            f"|linear predictor| > {SEPARATION_ETA:g} at {extreme}/{n_points} points"
        )


def _moments(groups: _Groups, beta, link, varfun):
    """Per length-group: eta, mu, dmu, v, resid, pearson."""
    out = {}
    etas = []
    for m, (X, Y, _) in groups.by_len.items():
        eta = X @ beta
        mu = link.inverse(eta)
        dmu = link.inverse_deriv(eta)
        v = np.maximum(varfun(mu), _VAR_FLOOR)
        resid = Y - mu
        pearson = resid / np.sqrt(v)
        out[m] = (eta, mu, dmu, v, resid, pearson)
        etas.append(eta)
    _check_separation(link.name, etas, groups.n_points)
    return out


def _dispersion(groups: _Groups, moments, varfun_kind: str, k: int) -> float:
    if varfun_kind == "binomial":
        return 1.0
    total = sum(float(np.sum(mo[5] ** 2)) for mo in moments.values())
    dof = max(groups.n_points - k, 1)
    return total / dof


def _rho_update(workcorr: WorkingCorrelation, moments, phi: float):
    if workcorr.rho is not None or workcorr.kind == "independence":
        return workcorr.rho if workcorr.kind != "independence" else 0.0
    residuals = []
    scale = math.sqrt(phi)
    for _, mo in moments.items():
        for row in mo[5]:
            residuals.append(row / scale)
    return estimate_rho(residuals, workcorr.kind)


def _rinv_by_len(groups: _Groups, workcorr: WorkingCorrelation, rho) -> dict[int, np.ndarray]:
    return {
        m: np.linalg.inv(workcorr.matrix(m, rho)) for m in groups.by_len
    }


def _score_and_info(groups: _Groups, moments, rinv, phi):
    k = groups.k
    psi = np.zeros(k)
    info = np.zeros((k, k))
    for m, (X, _, _) in groups.by_len.items():
        _, _, dmu, v, resid, _ = moments[m]
        sv = np.sqrt(v)
        U = X * (dmu / sv)[..., None]
        q = (resid / sv) @ rinv[m].T
        psi += np.einsum("gmp,gm->p", U, q) / phi
        W2 = np.einsum("mn,gnq->gmq", rinv[m], U)
        info += np.einsum("gmp,gmq->pq", U, W2) / phi
    return psi, info


def _score_norm(groups: _Groups, beta, link, varfun, rinv, phi) -> float:
    moments = {}
    for m, (X, Y, _) in groups.by_len.items():
        eta = X @ beta
        mu = link.inverse(eta)
        dmu = link.inverse_deriv(eta)
        v = np.maximum(varfun(mu), _VAR_FLOOR)
        moments[m] = (eta, mu, dmu, v, Y - mu, (Y - mu) / np.sqrt(v))
    psi, _ = _score_and_info(groups, moments, rinv, phi)
    return float(np.linalg.norm(psi))


def solve_gee(
    panels,
    link: Link,
    varfun: str = "binomial",
    workcorr: WorkingCorrelation | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> GeeFit:
    """Fit a GEE over per-subject design/response panels.

    Parameters
    ----------
    panels : sequence of (X_i, y_i)
        One design matrix (m_i, k) and response vector (m_i,) per subject.
    link : Link
    varfun : str
        ``"binomial"`` (dispersion fixed at 1) or ``"gaussian"``
        (dispersion = mean Pearson chi-square over points minus k).
    workcorr : WorkingCorrelation
        Defaults to independence. A ``rho`` on the structure pins the
        parameter; otherwise it is moment-updated each iteration.
    tol : float
        Relative coefficient-change tolerance.
    max_iter : int

    Returns
    -------
    GeeFit
        ``converged`` is False when the iteration budget is exhausted;
        the last iterate is still returned.

    Raises
    ------
    RankDeficientDesign
        If the stacked design has column rank below k.
    SeparationSuspected
        If the linear predictor exceeds 30 in absolute value on at least
        10 percent of points (non-identity links).
    """
    if workcorr is None:
        workcorr = WorkingCorrelation.independence()
    groups = _Groups(panels)
    k = groups.k
    stacked = np.vstack([np.asarray(X, dtype=float) for X, _ in panels])
    if np.linalg.matrix_rank(stacked) < k:
        raise RankDeficientDesign(f"stacked design has rank < {k}")

    varf = variance_function(varfun)

    # starting point: independence fit, itself started at the
    # link-transformed mean response with zero slopes
    if workcorr.kind != "independence":
        start_fit = solve_gee(panels, link, varfun, WorkingCorrelation.independence(), tol, max_iter)
        beta = start_fit.beta.copy()
    else:
        ybar = float(np.mean(np.concatenate([np.asarray(y, dtype=float) for _, y in panels])))
        beta = np.zeros(k)
        if varfun == "binomial":
            ybar = min(max(ybar, 1e-6), 1.0 - 1e-6)
        with np.errstate(divide="ignore", invalid="ignore"):
            intercept = float(link.transform(ybar))
        beta[0] = intercept if math.isfinite(intercept) else 0.0

    rho = workcorr.rho if workcorr.kind != "independence" else 0.0
    phi = 1.0
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        moments = _moments(groups, beta, link, varf)
        phi = _dispersion(groups, moments, varfun, k)
        rho = _rho_update(workcorr, moments, phi)
        rinv = _rinv_by_len(groups, workcorr, rho)
        psi, info = _score_and_info(groups, moments, rinv, phi)
        delta = np.linalg.solve(info, psi)
        base_norm = float(np.linalg.norm(psi))
        step = 1.0
        for _ in range(10):
            if _score_norm(groups, beta + step * delta, link, varf, rinv, phi) <= base_norm:
                break
            step *= 0.5
        new_beta = beta + step * delta
        change = np.max(np.abs(new_beta - beta)) / (1.0 + np.max(np.abs(new_beta)))
        beta = new_beta
        if change < tol:
            converged = True
            break

    # freeze working covariance at the solution
    moments = _moments(groups, beta, link, varf)
    phi = _dispersion(groups, moments, varfun, k)
    rho = _rho_update(workcorr, moments, phi)
    rinv = _rinv_by_len(groups, workcorr, rho)

    scores = np.zeros((groups.n_subjects, k))
    bread = np.zeros((k, k))
    meat = np.zeros((k, k))
    info = np.zeros((k, k))
    workspace: list[SubjectWork | None] = [None] * groups.n_subjects
    for m, (X, Y, ids) in groups.by_len.items():
        eta, mu, dmu, v, resid, pearson = moments[m]
        sv = np.sqrt(v)
        U = X * (dmu / sv)[..., None]
        q = (pearson @ rinv[m].T) / phi  # = (Sigma^-1 r) * sv
        subj_scores = np.einsum("gmp,gm->gp", U, q)
        W2 = np.einsum("mn,gnq->gmq", rinv[m], U)
        info += np.einsum("gmp,gmq->pq", U, W2) / phi
        # exact Jacobian: second-derivative channel minus information-like term
        sig_r = q / sv  # Sigma^-1 (y - mu)
        d2 = link.inverse_deriv2(eta)
        bread += np.einsum("gmp,gm,gmq->pq", X, d2 * sig_r, X)
        bread -= np.einsum("gmp,gmq->pq", U, W2) / phi
        meat += subj_scores.T @ subj_scores
        for g, idx in enumerate(ids):
            scores[idx] = subj_scores[g]
            siginv = (rinv[m] / np.outer(sv[g], sv[g])) / phi
            workspace[idx] = SubjectWork(
                X=X[g], y=Y[g], eta=eta[g], mu=mu[g],
                dmu=dmu[g], d2mu=d2[g],
                resid=resid[g], siginv=siginv,
            )

    breadinv = np.linalg.inv(bread)
    cov_robust = breadinv @ meat @ breadinv.T
    cov_model = np.linalg.inv(info)
    return GeeFit(
        beta=beta,
        cov_model=cov_model,
        cov_robust=cov_robust,
        rho=rho,
        phi=phi,
        n_iter=n_iter,
        converged=converged,
        scores=scores,
        bread=bread,
        workspace=workspace,
    )


class TaylorCheck(NamedTuple):
    exact: float
    approx: float


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite.hermgauss(64)


def taylor_mean_check(link: Link, mean: float, variance: float) -> TaylorCheck:
    """Compare E[g^{-1}(eta)] under eta ~ N(mean, variance) with g^{-1}(mean).

    The exact value is Gauss-Hermite quadrature (64 nodes); the
    approximation is the inverse link at the mean, i.e. the first-order
    expansion the corrected estimator relies on. With ``variance = 0``
    the two coincide exactly.

    Raises
    ------
    QuadratureFailure
        If the integral evaluates to a non-finite value.
    ValueError
        If ``variance`` is negative.
    """
    if variance < 0:
        raise ValueError(f"variance must be non-negative, got {variance}")
    approx = float(link.inverse(np.asarray(mean, dtype=float)))
    if variance == 0.0:
        return TaylorCheck(exact=approx, approx=approx)
    points = mean + math.sqrt(2.0 * variance) * _GH_NODES
    exact = float(_GH_WEIGHTS @ link.inverse(points) / math.sqrt(math.pi))
    if not math.isfinite(exact):
        raise QuadratureFailure(f"quadrature non-finite for mean={mean}, variance={variance}")
    return TaylorCheck(exact=exact, approx=approx)
