"""Two-step measurement-error-corrected estimation and its variance.

Step 1 fits the calibration model on validation data; step 2 plugs the
calibrated exposure history into the outcome GEE. The covariance stacks
the two estimating functions and differentiates the outcome score
through the imputation chain, so first-step uncertainty is propagated
instead of ignored.

Variants
--------
``predicted``
    Calibrated exposures everywhere (main and, under an internal
    validation design, validation subjects).
``true-ivs``
    As ``predicted``, but measured true exposures replace calibrated
    values wherever available (internal designs only).
``ivw``
    Precision-weighted combination of the corrected main-study-only fit
    with the validation-only fit on true exposures (internal designs).
``uncorrected``
    The surrogate series used as if error-free; robust GEE variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import DESIGN_IVS, Study, SubjectPanel, validate_study
from .errors import (
    DesignMismatch,
    DimensionMismatch,
    SingularBread,
    SingularVariance,
    UserInputError,
)
from .exposure import HistoryFunctional
from .gee import GeeFit, Link, WorkingCorrelation, solve_gee
from .mem import MemFit, approximation_diagnostic, fit_mem_gee, fit_mem_ols, mem_design

Z95 = 1.959964

VARIANT_PREDICTED = "predicted"
VARIANT_TRUE_IVS = "true-ivs"
VARIANT_IVW = "ivw"
VARIANT_UNCORRECTED = "uncorrected"
VARIANTS = (VARIANT_PREDICTED, VARIANT_TRUE_IVS, VARIANT_IVW, VARIANT_UNCORRECTED)


@dataclass
class SandwichParts:
    """Bread and meat of the stacked estimating system.

    ``bread`` is block lower-triangular: the calibration block, a zero
    upper-right block (the calibration score never involves the outcome
    coefficients), and the outcome score differentiated in both
    coefficient sets. ``meat`` is the uncentered sum of outer products
    of stacked per-subject scores; under an external design its
    cross-block is exactly zero because no subject contributes to both.
    """

    bread: np.ndarray
    meat: np.ndarray
    dim_alpha: int = 0


def sandwich_variance(parts: SandwichParts) -> np.ndarray:
    """Covariance of the stacked estimate: bread-inverse meat bread-inverse-T.

    Raises
    ------
    SingularBread
        If the bread matrix is not invertible.
    """
    bread = np.asarray(parts.bread, dtype=float)
    try:
        binv = np.linalg.inv(bread)
    except np.linalg.LinAlgError:
        raise SingularBread("bread matrix is singular") from None
    cov = binv @ np.asarray(parts.meat, dtype=float) @ binv.T
    return 0.5 * (cov + cov.T)


@dataclass
class CorrectedFit:
    """Outcome-model fit with measurement-error correction applied.

    ``covariance`` is the outcome-coefficient block of the stacked
    sandwich (or the plain robust sandwich for the uncorrected variant);
    ``wald_cis`` are 95 percent intervals. ``diagnostics`` records the
    approximation statistic, convergence of each step, and variant
    internals.
    """

    variant: str
    beta: np.ndarray
    covariance: np.ndarray
    alpha_fit: MemFit | None
    wald_cis: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    gee_fit: GeeFit | None = field(default=None, repr=False)
    stacked: "StackedSystem | None" = field(default=None, repr=False)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


def _wald(beta: np.ndarray, cov: np.ndarray) -> np.ndarray:
    se = np.sqrt(np.diag(cov))
    return np.column_stack([beta - Z95 * se, beta + Z95 * se])


def _gate(study: Study) -> None:
    report = validate_study(study)
    if not report.ok:
        raise UserInputError("study failed validation:\n" + report.describe())


def outcome_design(times, values, covariates, functional: HistoryFunctional):
    """Outcome design rows (1, s, t, s*t, W) from an exposure series."""
    s = functional.apply(times, values)
    return np.column_stack(
        [np.ones_like(times), s, times, s * times, covariates]
    )


class _OutcomeRow:
    """One outcome subject: response, design inputs, and the imputation
    dependence of its exposure series on the calibration coefficients."""

    __slots__ = ("panel", "values", "zdep", "y")

    def __init__(self, panel: SubjectPanel, values: np.ndarray, zdep: np.ndarray):
        self.panel = panel
        self.values = values
        self.zdep = zdep  # d values / d alpha, rows zeroed where true values used
        self.y = panel.outcome


def _imputed_row(panel: SubjectPanel, memfit: MemFit, keep_true: bool) -> _OutcomeRow:
    values = memfit.predict(panel.surrogate, panel.times, panel.covariates)
    zdep = mem_design(panel.surrogate, panel.times, panel.covariates, memfit.interaction)
    if keep_true and panel.exposure_mask.any():
        mask = panel.exposure_mask
        values = values.copy()
        values[mask] = panel.true_exposure[mask]
        zdep = zdep.copy()
        zdep[mask] = 0.0
    return _OutcomeRow(panel, values, zdep)


class StackedSystem:
    """Joint estimating system of calibration and outcome coefficients.

    Holds everything needed to evaluate the stacked per-subject scores
    at an arbitrary coefficient vector with the working covariances
    frozen at the solution, and to assemble the analytic bread. The
    numerical-Jacobian cross-check in the test suite differentiates
    :meth:`psi_total` and compares against :meth:`bread`.
    """

    def __init__(
        self,
        memfit: MemFit,
        geefit: GeeFit,
        outcome_rows: list[_OutcomeRow],
        functional: HistoryFunctional,
        link: Link,
    ):
        self.memfit = memfit
        self.geefit = geefit
        self.rows = outcome_rows
        self.functional = functional
        self.link = link
        self.dim_alpha = memfit.alpha.shape[0]
        self.dim_beta = geefit.beta.shape[0]
        # stacked subject list: every calibration subject and every
        # outcome subject, merged by identity where they coincide
        mem_index = {sid: i for i, sid in enumerate(memfit.subject_ids)}
        out_index = {row.panel.subject_id: i for i, row in enumerate(outcome_rows)}
        ids = list(memfit.subject_ids)
        ids += [sid for sid in out_index if sid not in mem_index]
        self.subject_ids = ids
        self._mem_slot = [mem_index.get(sid) for sid in ids]
        self._out_slot = [out_index.get(sid) for sid in ids]

    @property
    def theta_hat(self) -> np.ndarray:
        return np.concatenate([self.memfit.alpha, self.geefit.beta])

    def scores(self) -> np.ndarray:
        """Stacked per-subject scores at the solution."""
        n = len(self.subject_ids)
        out = np.zeros((n, self.dim_alpha + self.dim_beta))
        for s in range(n):
            mi, oi = self._mem_slot[s], self._out_slot[s]
            if mi is not None:
                out[s, : self.dim_alpha] = self.memfit.scores[mi]
            if oi is not None:
                out[s, self.dim_alpha :] = self.geefit.scores[oi]
        return out

    def bread(self) -> np.ndarray:
        """Analytic Jacobian of the stacked score at the solution.

        The outcome-by-calibration block has three channels: the
        calibrated exposure entering the design columns, the mean
        derivative through the linear predictor, and the residual. All
        flow through the functional's linear weights on the calibration
        design rows.
        """
        da, db = self.dim_alpha, self.dim_beta
        bread = np.zeros((da + db, da + db))
        bread[:da, :da] = self.memfit.bread
        bread[da:, da:] = self.geefit.bread
        beta = self.geefit.beta
        bba = np.zeros((db, da))
        for oi, row in enumerate(self.rows):
            work = self.geefit.workspace[oi]
            t = row.panel.times
            w = self.functional.weights(t)
            g_mat = w @ row.zdep  # d s_hat / d alpha, (m, da)
            slope = beta[1] + beta[3] * t
            sig_r = work.siginv @ work.resid
            v = work.dmu * sig_r
            bba[1] += g_mat.T @ v
            bba[3] += g_mat.T @ (t * v)
            bba += work.X.T @ (g_mat * (work.d2mu * slope * sig_r)[:, None])
            lam_x = work.X * work.dmu[:, None]
            bba -= lam_x.T @ work.siginv @ (g_mat * (work.dmu * slope)[:, None])
        bread[da:, :da] = bba
        return bread

    def meat(self) -> np.ndarray:
        s = self.scores()
        return s.T @ s

    def parts(self) -> SandwichParts:
        return SandwichParts(bread=self.bread(), meat=self.meat(), dim_alpha=self.dim_alpha)

    # -- score re-evaluation at arbitrary theta (frozen weights) --------

    def psi(self, theta: np.ndarray) -> np.ndarray:
        """Stacked per-subject scores at ``theta``.

        The outcome working covariance and the calibration working
        correlation stay frozen at their solution values, matching the
        derivative convention of :meth:`bread`.
        """
        theta = np.asarray(theta, dtype=float)
        da, db = self.dim_alpha, self.dim_beta
        alpha, beta = theta[:da], theta[da:]
        n = len(self.subject_ids)
        out = np.zeros((n, da + db))
        mem_scores = self._mem_scores_at(alpha)
        for s in range(n):
            mi, oi = self._mem_slot[s], self._out_slot[s]
            if mi is not None:
                out[s, :da] = mem_scores[mi]
            if oi is not None:
                out[s, da:] = self._outcome_score_at(oi, alpha, beta)
        return out

    def psi_total(self, theta: np.ndarray) -> np.ndarray:
        return self.psi(theta).sum(axis=0)

    def _mem_scores_at(self, alpha: np.ndarray) -> np.ndarray:
        base = self.memfit
        shift = alpha - base.alpha
        if not np.any(shift):
            return base.scores
        # the calibration score is linear in alpha with per-subject
        # Jacobian bread_rows[i], so the shift is exact, not approximate
        return base.scores + base.bread_rows @ shift

    def _outcome_score_at(self, oi: int, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
        row = self.rows[oi]
        work = self.geefit.workspace[oi]
        panel = row.panel
        values = row.zdep @ alpha
        fixed = np.all(row.zdep == 0.0, axis=1)
        if fixed.any():
            values = np.where(fixed, row.values, values)
        x = outcome_design(panel.times, values, panel.covariates, self.functional)
        eta = x @ beta
        mu = self.link.inverse(eta)
        dmu = self.link.inverse_deriv(eta)
        resid = row.y - mu
        return x.T @ (dmu * (work.siginv @ resid))


def _resolve_varfun(link: Link, varfun: str | None) -> str:
    if varfun is not None:
        return varfun
    return "gaussian" if link.name == "identity" else "binomial"


def _fit_mem_step(study: Study, workcorr, interaction: bool) -> MemFit:
    # With at most one measured value per subject every working correlation
    # matrix is 1x1, so the GEE step collapses to ordinary least squares.
    single = all(
        int(p.exposure_mask.sum()) <= 1 for p in study.validation
    )
    if single:
        return fit_mem_ols(study, interaction=interaction)
    return fit_mem_gee(study, workcorr, interaction=interaction)


def _outcome_panels(study: Study, include_validation: bool) -> list[SubjectPanel]:
    panels = list(study.main)
    if include_validation:
        panels += [p for p in study.validation if p.outcome is not None]
    return panels


def fit_corrected(
    study: Study,
    functional: HistoryFunctional | None = None,
    link: Link | None = None,
    variant: str = VARIANT_PREDICTED,
    mem_workcorr: WorkingCorrelation | None = None,
    outcome_workcorr: WorkingCorrelation | None = None,
    interaction: bool = True,
    varfun: str | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> CorrectedFit:
    """Two-step corrected fit of the outcome model.

    Step 1 fits the calibration model on the validation data (OLS when
    every subject has a single measured point, GEE otherwise). Step 2
    summarizes the calibrated exposure series with ``functional``,
    assembles outcome design rows (1, s, t, s*t, W), and solves the
    outcome GEE over the main study plus, under an internal design, the
    validation subjects. The covariance propagates step-1 uncertainty
    through the stacked sandwich.

    Parameters
    ----------
    study : Study
    functional : HistoryFunctional
        Defaults to the cumulative average.
    link : Link
        Defaults to logit.
    variant : str
        One of ``predicted``, ``true-ivs``, ``ivw``, ``uncorrected``.
    mem_workcorr, outcome_workcorr : WorkingCorrelation
        Working correlations of the two steps; both default to
        independence.
    interaction : bool
        Whether the calibration design includes the surrogate-by-time
        column.
    varfun : str, optional
        Outcome variance function; defaults to binomial except under the
        identity link.

    Raises
    ------
    UserInputError
        If the study fails structural validation.
    DesignMismatch
        If the variant requires an internal design and the study is
        external.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    functional = functional or HistoryFunctional.cumavg()
    link = link or Link.logit()
    if variant == VARIANT_UNCORRECTED:
        return fit_uncorrected(
            study, functional, link, outcome_workcorr, varfun=varfun, tol=tol, max_iter=max_iter
        )
    _gate(study)
    if variant in (VARIANT_TRUE_IVS, VARIANT_IVW) and study.design != DESIGN_IVS:
        raise DesignMismatch(f"variant {variant!r} requires an internal validation design")
    if variant == VARIANT_IVW:
        return _fit_ivw(
            study, functional, link, mem_workcorr, outcome_workcorr,
            interaction, varfun, tol, max_iter,
        )

    memfit = _fit_mem_step(study, mem_workcorr, interaction)
    include_validation = study.design == DESIGN_IVS
    panels = _outcome_panels(study, include_validation)
    keep_true = variant == VARIANT_TRUE_IVS
    rows = [_imputed_row(p, memfit, keep_true) for p in panels]
    gee_panels = [
        (outcome_design(r.panel.times, r.values, r.panel.covariates, functional), r.y)
        for r in rows
    ]
    geefit = solve_gee(
        gee_panels, link, _resolve_varfun(link, varfun),
        outcome_workcorr or WorkingCorrelation.independence(), tol, max_iter,
    )
    system = StackedSystem(memfit, geefit, rows, functional, link)
    cov_full = sandwich_variance(system.parts())
    da = system.dim_alpha
    covariance = cov_full[da:, da:]
    beta = geefit.beta
    diagnostics = {
        "converged": geefit.converged,
        "approximation_statistic": approximation_diagnostic(memfit, beta, study, functional),
        "mem": {
            "n_subjects": memfit.n_subjects,
            "n_points": memfit.n_points,
            "residual_variance": memfit.residual_variance,
            "workcorr": memfit.workcorr_kind,
        },
        "outcome": {
            "n_iter": geefit.n_iter,
            "converged": geefit.converged,
            "phi": geefit.phi,
            "n_subjects": len(rows),
        },
    }
    return CorrectedFit(
        variant=variant,
        beta=beta,
        covariance=covariance,
        alpha_fit=memfit,
        wald_cis=_wald(beta, covariance),
        diagnostics=diagnostics,
        gee_fit=geefit,
        stacked=system,
    )


def _fit_ivw(
    study, functional, link, mem_workcorr, outcome_workcorr, interaction, varfun, tol, max_iter
) -> CorrectedFit:
    fit_main = _fit_corrected_main_only(
        study, functional, link, mem_workcorr, outcome_workcorr,
        interaction, varfun, tol, max_iter,
    )
    fit_ivs = fit_ivs_true(study, functional, link, outcome_workcorr, varfun, tol, max_iter)
    return ivw_combine(fit_main, fit_ivs)


def _fit_corrected_main_only(
    study, functional, link, mem_workcorr, outcome_workcorr, interaction, varfun, tol, max_iter
) -> CorrectedFit:
    """Corrected fit whose outcome GEE uses main-study subjects only."""
    memfit = _fit_mem_step(study, mem_workcorr, interaction)
    panels = _outcome_panels(study, include_validation=False)
    rows = [_imputed_row(p, memfit, keep_true=False) for p in panels]
    gee_panels = [
        (outcome_design(r.panel.times, r.values, r.panel.covariates, functional), r.y)
        for r in rows
    ]
    geefit = solve_gee(
        gee_panels, link, _resolve_varfun(link, varfun),
        outcome_workcorr or WorkingCorrelation.independence(), tol, max_iter,
    )
    system = StackedSystem(memfit, geefit, rows, functional, link)
    cov_full = sandwich_variance(system.parts())
    da = system.dim_alpha
    covariance = cov_full[da:, da:]
    return CorrectedFit(
        variant=VARIANT_PREDICTED,
        beta=geefit.beta,
        covariance=covariance,
        alpha_fit=memfit,
        wald_cis=_wald(geefit.beta, covariance),
        diagnostics={
            "converged": geefit.converged,
            "approximation_statistic": approximation_diagnostic(
                memfit, geefit.beta, study, functional
            ),
            "outcome": {"n_iter": geefit.n_iter, "converged": geefit.converged},
        },
        gee_fit=geefit,
        stacked=system,
    )


def fit_uncorrected(
    study: Study,
    functional: HistoryFunctional | None = None,
    link: Link | None = None,
    workcorr: WorkingCorrelation | None = None,
    varfun: str | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> CorrectedFit:
    """Outcome GEE on the surrogate series as if it were error-free.

    All subjects with outcomes contribute. The covariance is the plain
    robust GEE sandwich; no calibration step is involved.
    """
    functional = functional or HistoryFunctional.cumavg()
    link = link or Link.logit()
    _gate(study)
    panels = _outcome_panels(study, include_validation=study.design == DESIGN_IVS)
    gee_panels = [
        (outcome_design(p.times, p.surrogate, p.covariates, functional), p.outcome)
        for p in panels
    ]
    geefit = solve_gee(
        gee_panels, link, _resolve_varfun(link, varfun),
        workcorr or WorkingCorrelation.independence(), tol, max_iter,
    )
    covariance = geefit.cov_robust
    return CorrectedFit(
        variant=VARIANT_UNCORRECTED,
        beta=geefit.beta,
        covariance=covariance,
        alpha_fit=None,
        wald_cis=_wald(geefit.beta, covariance),
        diagnostics={
            "converged": geefit.converged,
            "outcome": {
                "n_iter": geefit.n_iter,
                "converged": geefit.converged,
                "phi": geefit.phi,
                "n_subjects": len(panels),
            }
        },
        gee_fit=geefit,
    )


def fit_ivs_true(
    study: Study,
    functional: HistoryFunctional | None = None,
    link: Link | None = None,
    workcorr: WorkingCorrelation | None = None,
    varfun: str | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> GeeFit:
    """Outcome GEE on the validation subjects' measured true exposures.

    Each subject is restricted to the points where the true exposure was
    measured and the functional is applied to that subseries; with one
    measured point per subject the summarized exposure is the
    measurement itself and the fit is a cross-sectional regression.

    Raises
    ------
    DesignMismatch
        If the study design is external (no validation outcomes).
    """
    functional = functional or HistoryFunctional.cumavg()
    link = link or Link.logit()
    if study.design != DESIGN_IVS:
        raise DesignMismatch("true-exposure validation fit requires an internal design")
    panels = []
    for p in study.validation:
        mask = p.exposure_mask
        if not mask.any() or p.outcome is None:
            continue
        t = p.times[mask]
        x = outcome_design(t, p.true_exposure[mask], p.covariates[mask], functional)
        panels.append((x, p.outcome[mask]))
    if not panels:
        raise DesignMismatch("no validation subject has measured true exposure with outcomes")
    workcorr = workcorr or WorkingCorrelation.independence()
    if all(len(y) <= 1 for _, y in panels):
        # Every correlation matrix is 1x1, so the requested structure is
        # irrelevant and its lag-correlation cannot be estimated.
        workcorr = WorkingCorrelation.independence()
    return solve_gee(
        panels, link, _resolve_varfun(link, varfun),
        workcorr, tol, max_iter,
    )


def ivw_combine(fit_main: CorrectedFit, fit_ivs: GeeFit) -> CorrectedFit:
    """Inverse-variance-weighted combination of two coefficient estimates.

    The combined estimate weights each input by its inverse covariance;
    the combined covariance is the inverse of the summed precisions.  The
    validation-only component enters with its model-based covariance, the
    variance an ordinary likelihood fit of that regression would report.

    Raises
    ------
    DimensionMismatch
        If the coefficient layouts differ.
    SingularVariance
        If either covariance (or the summed precision) is singular.
    """
    beta_m, v_m = fit_main.beta, fit_main.covariance
    beta_i, v_i = fit_ivs.beta, fit_ivs.cov_model
    if beta_m.shape != beta_i.shape:
        raise DimensionMismatch(
            f"coefficient layouts differ: {beta_m.shape} vs {beta_i.shape}"
        )
    try:
        p_m = np.linalg.inv(v_m)
        p_i = np.linalg.inv(v_i)
        cov = np.linalg.inv(p_m + p_i)
    except np.linalg.LinAlgError:
        raise SingularVariance("component covariance not invertible") from None
    beta = cov @ (p_m @ beta_m + p_i @ beta_i)
    cov = 0.5 * (cov + cov.T)
    return CorrectedFit(
        variant=VARIANT_IVW,
        beta=beta,
        covariance=cov,
        alpha_fit=fit_main.alpha_fit,
        wald_cis=_wald(beta, cov),
        diagnostics={
            "converged": fit_main.diagnostics.get("converged", True) and fit_ivs.converged,
            "main": {"beta": beta_m.tolist(), "se": fit_main.se.tolist()},
            "validation_only": {
                "beta": beta_i.tolist(),
                "se": np.sqrt(np.diag(v_i)).tolist(),
                "converged": fit_ivs.converged,
            },
            "approximation_statistic": fit_main.diagnostics.get("approximation_statistic"),
        },
        gee_fit=fit_main.gee_fit,
        stacked=fit_main.stacked,
    )
