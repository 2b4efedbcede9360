"""Measurement error model: calibration fit on validation data plus diagnostics.

The calibration model is linear in the surrogate, time, their
interaction, and the covariates. It is fit by OLS when every subject
contributes a single measured point and by an identity-link GEE when
measurements repeat; with an independence working correlation the two
coincide exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import stats

from .dataset import Study
from .errors import (
    InsufficientLags,
    LengthMismatch,
    NoConvergence,
    RankDeficientDesign,
    TooFewSubjects,
)
from .exposure import HistoryFunctional
from .gee import WorkingCorrelation, estimate_rho

MEM_TOL = 1e-8
MEM_MAX_ITER = 100


def mem_design(
    surrogate: np.ndarray,
    times: np.ndarray,
    covariates: np.ndarray,
    interaction: bool = True,
) -> np.ndarray:
    """Calibration design rows: (1, C, t, C*t, W) or (1, C, t, W)."""
    surrogate = np.asarray(surrogate, dtype=float)
    times = np.asarray(times, dtype=float)
    covariates = np.asarray(covariates, dtype=float)
    cols = [np.ones_like(surrogate), surrogate, times]
    if interaction:
        cols.append(surrogate * times)
    return np.column_stack(cols + [covariates])


def mem_design_labels(n_covariates: int, interaction: bool = True) -> list[str]:
    labels = ["intercept", "surrogate", "time"]
    if interaction:
        labels.append("surrogate:time")
    return labels + [f"W{j + 1}" for j in range(n_covariates)]


@dataclass
class MemFit:
    """Fitted calibration model.

    ``scores`` are per-subject estimating-function values at the
    solution and ``bread`` their Jacobian in alpha (the negative
    weighted cross-product of the design); both feed the stacked
    variance downstream. ``residual_variance`` pools squared residuals
    over all measured points.
    """

    alpha: np.ndarray
    residual_variance: float
    cov: np.ndarray
    scores: np.ndarray
    bread: np.ndarray
    design_labels: list[str]
    interaction: bool
    rho: object
    workcorr_kind: str
    n_subjects: int
    n_points: int
    subject_ids: list = field(default_factory=list, repr=False)
    bread_rows: np.ndarray = field(default=None, repr=False)  # (n_subjects, dim, dim)

    def predict(self, surrogate, times, covariates) -> np.ndarray:
        """Predicted true exposure at each row, under this fit's design."""
        z = mem_design(surrogate, times, covariates, self.interaction)
        if z.shape[1] != self.alpha.shape[0]:
            raise LengthMismatch(
                f"design width {z.shape[1]} != alpha length {self.alpha.shape[0]}"
            )
        return z @ self.alpha

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def _validation_rows(study: Study, single: bool):
    """Measured validation rows grouped by subject.

    Returns (ids, Z-less raw tuples) where each tuple is
    (surrogate, times, covariates, true_exposure) restricted to the
    measured points of one validation subject.
    """
    rows = []
    for panel in study.validation:
        mask = panel.exposure_mask
        if not mask.any():
            continue
        c = panel.true_exposure[mask]
        if single and c.shape[0] != 1:
            raise ValueError(
                f"subject {panel.subject_id!r} has {c.shape[0]} measured points; "
                "expected exactly one"
            )
        rows.append(
            (
                panel.subject_id,
                panel.surrogate[mask],
                panel.times[mask],
                panel.covariates[mask],
                c,
            )
        )
    return rows


def _assemble(rows, interaction: bool):
    designs, targets = [], []
    for _, surr, times, covs, c in rows:
        designs.append(mem_design(surr, times, covs, interaction))
        targets.append(c)
    return designs, targets


def _check_rank(designs, dim: int) -> None:
    if np.linalg.matrix_rank(np.vstack(designs)) < dim:
        raise RankDeficientDesign(f"calibration design has rank < {dim}")


def _finish(
    rows, designs, targets, alpha, rinvs, interaction, rho, kind
) -> MemFit:
    dim = alpha.shape[0]
    n_points = sum(z.shape[0] for z in designs)
    if n_points <= dim:
        raise TooFewSubjects(
            f"{n_points} measured points cannot identify {dim} coefficients"
        )
    rss = 0.0
    scores = np.zeros((len(rows), dim))
    bread_rows = np.zeros((len(rows), dim, dim))
    meat = np.zeros((dim, dim))
    for i, (z, c) in enumerate(zip(designs, targets)):
        resid = c - z @ alpha
        rss += float(resid @ resid)
        zr = z.T @ rinvs[i]
        scores[i] = zr @ resid
        bread_rows[i] = -(zr @ z)
        meat += np.outer(scores[i], scores[i])
    bread = bread_rows.sum(axis=0)
    sigma2 = rss / (n_points - dim)
    breadinv = np.linalg.inv(bread)
    cov = breadinv @ meat @ breadinv.T
    return MemFit(
        alpha=alpha,
        residual_variance=sigma2,
        cov=cov,
        scores=scores,
        bread=bread,
        design_labels=mem_design_labels(
            dim - (4 if interaction else 3), interaction
        ),
        interaction=interaction,
        rho=rho,
        workcorr_kind=kind,
        n_subjects=len(rows),
        n_points=n_points,
        subject_ids=[r[0] for r in rows],
        bread_rows=bread_rows,
    )


def fit_mem_ols(study: Study, interaction: bool = True) -> MemFit:
    """Fit the calibration model when each validation subject has one
    measured point.

    Solves the normal equations for the pooled design; the residual
    variance is RSS over (points minus coefficients).

    Raises
    ------
    TooFewSubjects
        If the number of measured points does not exceed the number of
        coefficients.
    RankDeficientDesign
    ValueError
        If some validation subject has more than one measured point
        (use :func:`fit_mem_gee` for repeated measurements).
    """
    rows = _validation_rows(study, single=True)
    if not rows:
        raise TooFewSubjects("no measured validation points")
    designs, targets = _assemble(rows, interaction)
    dim = designs[0].shape[1]
    if len(rows) <= dim:
        raise TooFewSubjects(f"{len(rows)} subjects cannot identify {dim} coefficients")
    _check_rank(designs, dim)
    z = np.vstack(designs)
    c = np.concatenate(targets)
    alpha, *_ = np.linalg.lstsq(z, c, rcond=None)
    rinvs = [np.eye(zi.shape[0]) for zi in designs]
    return _finish(rows, designs, targets, alpha, rinvs, interaction, 0.0, "independence")


def fit_mem_gee(
    study: Study,
    workcorr: WorkingCorrelation | None = None,
    interaction: bool = True,
    tol: float = MEM_TOL,
    max_iter: int = MEM_MAX_ITER,
) -> MemFit:
    """Fit the calibration model with repeated measured points per subject.

    Identity-link estimating equations with the requested working
    correlation, alternating the closed-form coefficient solve with
    moment updates of the correlation parameter until joint convergence.
    With independence correlation this equals pooled least squares
    exactly, and with one point per subject it reduces to
    :func:`fit_mem_ols`.

    Raises
    ------
    NoConvergence
        If the correlation-parameter iteration does not converge.
    RankDeficientDesign
    TooFewSubjects
    """
    if workcorr is None:
        workcorr = WorkingCorrelation.independence()
    rows = _validation_rows(study, single=False)
    if not rows:
        raise TooFewSubjects("no measured validation points")
    designs, targets = _assemble(rows, interaction)
    dim = designs[0].shape[1]
    _check_rank(designs, dim)
    n_points = sum(z.shape[0] for z in designs)
    if n_points <= dim:
        raise TooFewSubjects(f"{n_points} measured points cannot identify {dim} coefficients")

    def rinv_list(rho):
        out = []
        cache: dict[int, np.ndarray] = {}
        for z in designs:
            m = z.shape[0]
            if m not in cache:
                cache[m] = np.linalg.inv(workcorr.matrix(m, rho))
            out.append(cache[m])
        return out

    def solve_alpha(rinvs):
        lhs = np.zeros((dim, dim))
        rhs = np.zeros(dim)
        for z, c, ri in zip(designs, targets, rinvs):
            zr = z.T @ ri
            lhs += zr @ z
            rhs += zr @ c
        return np.linalg.solve(lhs, rhs)

    if workcorr.rho is not None and workcorr.kind != "independence":
        rho = workcorr.rho
    elif workcorr.kind == "unstructured":
        rho = np.eye(max(z.shape[0] for z in designs))
    else:
        rho = 0.0
    rinvs = rinv_list(rho)
    alpha = solve_alpha(rinvs)
    converged = workcorr.kind == "independence" or workcorr.rho is not None
    if not converged:
        for _ in range(max_iter):
            resid = [c - z @ alpha for z, c in zip(designs, targets)]
            sigma2 = sum(float(r @ r) for r in resid) / max(n_points - dim, 1)
            scale = math.sqrt(sigma2) if sigma2 > 0 else 1.0
            rho = estimate_rho([r / scale for r in resid], workcorr.kind)
            rinvs = rinv_list(rho)
            new_alpha = solve_alpha(rinvs)
            change = np.max(np.abs(new_alpha - alpha)) / (1.0 + np.max(np.abs(new_alpha)))
            alpha = new_alpha
            if change < tol:
                converged = True
                break
        if not converged:
            raise NoConvergence(
                f"correlation-parameter iteration did not converge in {max_iter} steps"
            )
    return _finish(rows, designs, targets, alpha, rinvs, interaction, rho, workcorr.kind)


class LagTestResult(NamedTuple):
    """Nested-model F test for dependence on earlier surrogate values."""

    f_stat: float
    df: tuple[int, int]
    p_value: float


def localized_error_test(study: Study, interaction: bool = True) -> LagTestResult:
    """Test whether the true exposure depends on earlier surrogate values.

    Augments the calibration design with the mean of each point's
    preceding surrogate values and F-tests the added column against the
    base model, pooled over the measured validation points that have at
    least one predecessor. Degrees of freedom pool across subjects,
    ignoring within-subject correlation, so the test is approximate.

    Raises
    ------
    InsufficientLags
        If no measured validation point has a preceding observation.
    """
    base_rows, lag_vals, targets = [], [], []
    for panel in study.validation:
        mask = panel.exposure_mask
        for j in range(panel.n_points):
            if not mask[j] or j == 0:
                continue
            base_rows.append(
                mem_design(
                    panel.surrogate[j : j + 1],
                    panel.times[j : j + 1],
                    panel.covariates[j : j + 1],
                    interaction,
                )[0]
            )
            lag_vals.append(float(np.mean(panel.surrogate[:j])))
            targets.append(panel.true_exposure[j])
    if not base_rows:
        raise InsufficientLags("no measured validation point has a prior observation")
    z0 = np.asarray(base_rows)
    z1 = np.column_stack([z0, lag_vals])
    c = np.asarray(targets)
    p_full = z1.shape[1]
    dof = z0.shape[0] - p_full
    if dof <= 0:
        raise InsufficientLags(f"{z0.shape[0]} usable points cannot support {p_full} coefficients")
    if np.linalg.matrix_rank(z1) < p_full:
        raise RankDeficientDesign("augmented calibration design is rank deficient")

    def rss(z):
        coef, *_ = np.linalg.lstsq(z, c, rcond=None)
        r = c - z @ coef
        return float(r @ r)

    rss0, rss1 = rss(z0), rss(z1)
    f_stat = max(rss0 - rss1, 0.0) / max(rss1 / dof, np.finfo(float).tiny)
    p_value = float(stats.f.sf(f_stat, 1, dof))
    return LagTestResult(f_stat=f_stat, df=(1, dof), p_value=p_value)


def approximation_diagnostic(
    memfit: MemFit,
    beta: np.ndarray,
    study: Study,
    functional: HistoryFunctional | None = None,
) -> float:
    """Average conditional outcome-scale variance induced by calibration error.

    For each main-study point, the only uncertain design entries are the
    summarized exposure and its time interaction, so the quadratic form
    of the outcome coefficients with the conditional design covariance
    collapses to ``Var(s_hat) * (b_exposure + b_interaction * t)^2``.
    ``Var(s_hat)`` propagates the calibration residual variance through
    the summary weights, treating calibration errors as independent
    across a subject's time points. Returns the mean over main-study
    points; values well below 0.4 indicate the first-order approximation
    underlying the corrected estimator is reliable.

    Raises
    ------
    LengthMismatch
        If ``beta`` does not conform to the outcome design
        (1, s, t, s*t, W).
    """
    if functional is None:
        functional = HistoryFunctional.cumavg()
    beta = np.asarray(beta, dtype=float)
    expected = 4 + study.n_covariates
    if beta.shape != (expected,):
        raise LengthMismatch(f"beta has length {beta.shape[0]}, outcome design needs {expected}")
    sigma2 = memfit.residual_variance
    total, count = 0.0, 0
    for panel in study.main:
        w = functional.weights(panel.times)
        var_s = sigma2 * np.sum(w * w, axis=1)
        slope = beta[1] + beta[3] * panel.times
        total += float(np.sum(var_s * slope**2))
        count += panel.n_points
    if count == 0:
        raise LengthMismatch("study has no main-study points")
    return total / count
