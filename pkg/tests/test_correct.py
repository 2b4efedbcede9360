"""Tests for the two-step corrected fit and its stacked covariance."""

import dataclasses
from types import SimpleNamespace

import numpy as np
import pytest

from memgee import (
    CorrectedFit,
    HistoryFunctional,
    Link,
    Study,
    SubjectPanel,
    WorkingCorrelation,
    fit_corrected,
    fit_ivs_true,
    fit_uncorrected,
    ivw_combine,
    sandwich_variance,
    solve_gee,
)
from memgee.correct import Z95, SandwichParts, outcome_design
from memgee.errors import (
    DesignMismatch,
    DimensionMismatch,
    SingularBread,
    SingularVariance,
    UserInputError,
)
from memgee.numkit import numerical_jacobian

from conftest import (
    build_identity_study,
    build_toy_evs,
    build_toy_ivs,
    newton_logistic,
)


def _scale_exposure(study: Study, a: float) -> Study:
    """Multiply surrogate and true exposure by ``a`` in every panel."""

    def scale(p: SubjectPanel) -> SubjectPanel:
        return SubjectPanel(
            subject_id=p.subject_id,
            times=p.times,
            surrogate=a * p.surrogate,
            covariates=p.covariates,
            outcome=p.outcome,
            true_exposure=None if p.true_exposure is None else a * p.true_exposure,
            exposure_mask=p.exposure_mask.copy(),
        )

    return Study(
        design=study.design,
        main=tuple(scale(p) for p in study.main),
        validation=tuple(scale(p) for p in study.validation),
    )


class TestOutcomeDesign:
    def test_column_layout(self):
        times = np.array([1.0, 2.0, 4.0])
        values = np.array([3.0, 1.0, 2.0])
        covs = np.array([[0.5], [0.25], [-1.0]])
        functional = HistoryFunctional.cumavg()
        x = outcome_design(times, values, covs, functional)
        s = functional.apply(times, values)
        assert x.shape == (3, 5)
        assert np.array_equal(x[:, 0], np.ones(3))
        assert np.array_equal(x[:, 1], s)
        assert np.array_equal(x[:, 2], times)
        assert np.array_equal(x[:, 3], s * times)
        assert np.array_equal(x[:, 4:], covs)

    def test_multiple_covariate_columns(self):
        times = np.array([0.0, 1.0])
        values = np.array([1.0, 2.0])
        covs = np.array([[1.0, 2.0], [3.0, 4.0]])
        x = outcome_design(times, values, covs, HistoryFunctional.cumavg())
        assert x.shape == (2, 6)
        assert np.array_equal(x[:, 4:], covs)


class TestFitCorrectedBasics:
    @pytest.mark.parametrize("variant", ["predicted", "uncorrected"])
    def test_evs_variants_finite(self, toy_evs, variant):
        fit = fit_corrected(toy_evs, variant=variant)
        assert fit.variant == variant
        assert fit.beta.shape == (5,)
        assert np.all(np.isfinite(fit.beta))
        assert np.all(np.isfinite(fit.covariance))
        assert fit.diagnostics["converged"]

    @pytest.mark.parametrize("variant", ["predicted", "true-ivs", "ivw", "uncorrected"])
    def test_ivs_variants_finite(self, toy_ivs, variant):
        fit = fit_corrected(toy_ivs, variant=variant)
        assert fit.beta.shape == (5,)
        assert np.all(np.isfinite(fit.beta))
        assert np.all(np.isfinite(fit.covariance))
        assert np.all(fit.se > 0.0)

    def test_unknown_variant_rejected(self, toy_evs):
        with pytest.raises(ValueError, match="unknown variant"):
            fit_corrected(toy_evs, variant="oracle")

    def test_internal_only_variants_rejected_on_evs(self, toy_evs):
        for variant in ("true-ivs", "ivw"):
            with pytest.raises(DesignMismatch):
                fit_corrected(toy_evs, variant=variant)

    def test_invalid_study_gated(self, toy_evs):
        broken = Study(
            design="evs",
            main=(dataclasses.replace(toy_evs.main[0], outcome=None),)
            + toy_evs.main[1:],
            validation=toy_evs.validation,
        )
        with pytest.raises(UserInputError, match="failed validation"):
            fit_corrected(broken, variant="predicted")

    def test_wald_intervals_match_covariance(self, toy_evs):
        fit = fit_corrected(toy_evs, variant="predicted")
        se = np.sqrt(np.diag(fit.covariance))
        assert np.allclose(fit.se, se, rtol=0.0, atol=0.0)
        mid = fit.wald_cis.mean(axis=1)
        half = 0.5 * (fit.wald_cis[:, 1] - fit.wald_cis[:, 0])
        assert np.allclose(mid, fit.beta, atol=1e-12)
        assert np.allclose(half, Z95 * se, rtol=1e-12)

    def test_diagnostics_content(self, toy_evs, toy_ivs):
        fit = fit_corrected(toy_evs, variant="predicted")
        stat = fit.diagnostics["approximation_statistic"]
        assert np.isfinite(stat) and stat >= 0.0
        assert fit.diagnostics["mem"]["n_subjects"] == 3
        assert fit.diagnostics["outcome"]["n_subjects"] == 4

        plain = fit_corrected(toy_evs, variant="uncorrected")
        assert "approximation_statistic" not in plain.diagnostics
        assert plain.alpha_fit is None

        combo = fit_corrected(toy_ivs, variant="ivw")
        assert "main" in combo.diagnostics
        assert "validation_only" in combo.diagnostics
        assert combo.diagnostics["converged"]

    def test_ivs_outcome_pool_includes_validation(self, toy_ivs):
        fit = fit_corrected(toy_ivs, variant="predicted")
        n = len(toy_ivs.main) + len(toy_ivs.validation)
        assert fit.diagnostics["outcome"]["n_subjects"] == n


class TestIdentityCalibration:
    """With the true exposure equal to the surrogate the calibration step
    learns the identity map and correction must change nothing."""

    def test_alpha_is_identity_map(self):
        study = build_identity_study(design="ivs")
        fit = fit_corrected(study, variant="predicted")
        assert np.allclose(fit.alpha_fit.alpha, [0, 1, 0, 0, 0], atol=1e-8)
        assert fit.alpha_fit.residual_variance < 1e-16

    @pytest.mark.parametrize("design", ["evs", "ivs"])
    def test_predicted_collapses_to_uncorrected(self, design):
        study = build_identity_study(design=design)
        corrected = fit_corrected(study, variant="predicted")
        plain = fit_corrected(study, variant="uncorrected")
        assert np.allclose(corrected.beta, plain.beta, atol=1e-6)

    def test_true_ivs_collapses_to_uncorrected(self):
        study = build_identity_study(design="ivs")
        corrected = fit_corrected(study, variant="true-ivs")
        plain = fit_corrected(study, variant="uncorrected")
        assert np.allclose(corrected.beta, plain.beta, atol=1e-6)

    @pytest.mark.parametrize("design", ["evs", "ivs"])
    def test_zero_residual_variance_gives_naive_covariance(self, design):
        # with an exact calibration fit the first step contributes no
        # score, so the stacked covariance must reduce to the plain
        # robust sandwich of the outcome step
        study = build_identity_study(design=design)
        corrected = fit_corrected(study, variant="predicted")
        plain = fit_corrected(study, variant="uncorrected")
        assert np.allclose(corrected.covariance, plain.covariance, atol=1e-6)
        assert np.allclose(
            corrected.covariance, corrected.gee_fit.cov_robust, atol=1e-8
        )

    def test_ivw_collapses_to_combination_of_plain_fits(self):
        study = build_identity_study(design="ivs")
        combo = fit_corrected(study, variant="ivw")

        link = Link.logit()
        functional = HistoryFunctional.cumavg()
        panels = [
            (outcome_design(p.times, p.surrogate, p.covariates, functional), p.outcome)
            for p in study.main
        ]
        gfit = solve_gee(
            panels, link, "binomial", WorkingCorrelation.independence(), 1e-8, 100
        )
        se = np.sqrt(np.diag(gfit.cov_robust))
        fit_main = CorrectedFit(
            variant="predicted",
            beta=gfit.beta,
            covariance=gfit.cov_robust,
            alpha_fit=None,
            wald_cis=np.column_stack([gfit.beta - Z95 * se, gfit.beta + Z95 * se]),
        )
        expected = ivw_combine(fit_main, fit_ivs_true(study))
        assert np.allclose(combo.beta, expected.beta, atol=1e-6)
        assert np.allclose(combo.covariance, expected.covariance, atol=1e-6)


class TestStackedSystem:
    def test_bread_matches_numerical_jacobian_evs(self, toy_evs):
        fit = fit_corrected(toy_evs, variant="predicted")
        system = fit.stacked
        jac = numerical_jacobian(system.psi_total, system.theta_hat)
        bread = system.bread()
        rel = np.max(np.abs(jac - bread)) / np.max(np.abs(bread))
        assert rel < 1e-4

    def test_bread_matches_numerical_jacobian_ivs(self, toy_ivs):
        fit = fit_corrected(toy_ivs, variant="true-ivs")
        system = fit.stacked
        jac = numerical_jacobian(system.psi_total, system.theta_hat)
        bread = system.bread()
        rel = np.max(np.abs(jac - bread)) / np.max(np.abs(bread))
        assert rel < 1e-4

    def test_scores_sum_to_zero_at_solution(self, toy_evs):
        fit = fit_corrected(toy_evs, variant="predicted")
        system = fit.stacked
        total = system.psi_total(system.theta_hat)
        assert np.max(np.abs(total)) < 1e-6
        assert np.allclose(system.psi(system.theta_hat), system.scores(), atol=1e-10)

    def test_evs_meat_cross_block_exactly_zero(self, toy_evs):
        fit = fit_corrected(toy_evs, variant="predicted")
        parts = fit.stacked.parts()
        da = parts.dim_alpha
        assert np.all(parts.meat[da:, :da] == 0.0)
        assert np.all(parts.meat[:da, da:] == 0.0)

    def test_ivs_meat_cross_block_nonzero(self, toy_ivs):
        fit = fit_corrected(toy_ivs, variant="predicted")
        parts = fit.stacked.parts()
        da = parts.dim_alpha
        assert np.any(parts.meat[da:, :da] != 0.0)

    def test_bread_upper_right_block_zero(self, toy_ivs):
        fit = fit_corrected(toy_ivs, variant="predicted")
        system = fit.stacked
        bread = system.bread()
        da = system.dim_alpha
        assert np.all(bread[:da, da:] == 0.0)
        assert np.allclose(bread[:da, :da], fit.alpha_fit.bread)
        assert np.allclose(bread[da:, da:], fit.gee_fit.bread)

    def test_first_step_uncertainty_inflates_evs_variance(self, toy_evs):
        # under an external design the stacked covariance differs from
        # the fixed-calibration sandwich by a positive semidefinite term
        fit = fit_corrected(toy_evs, variant="predicted")
        diff = fit.covariance - fit.gee_fit.cov_robust
        eigs = np.linalg.eigvalsh(0.5 * (diff + diff.T))
        scale = np.max(np.abs(fit.covariance))
        assert eigs.min() > -1e-8 * scale


class TestSandwichVariance:
    def test_hand_algebra(self):
        bread = np.array([[2.0, 0.0], [1.0, 4.0]])
        meat = np.diag([1.0, 2.0])
        binv = np.linalg.inv(bread)
        expected = binv @ meat @ binv.T
        out = sandwich_variance(SandwichParts(bread=bread, meat=meat))
        assert np.allclose(out, 0.5 * (expected + expected.T), atol=1e-14)

    def test_output_symmetric_psd(self, toy_evs):
        fit = fit_corrected(toy_evs, variant="predicted")
        cov = sandwich_variance(fit.stacked.parts())
        assert np.array_equal(cov, cov.T)
        eigs = np.linalg.eigvalsh(cov)
        assert eigs.min() > -1e-10 * max(eigs.max(), 1.0)

    def test_singular_bread_raises(self):
        parts = SandwichParts(bread=np.zeros((3, 3)), meat=np.eye(3))
        with pytest.raises(SingularBread):
            sandwich_variance(parts)


class TestExposureRescale:
    def test_exposure_scale_equivariance(self, toy_evs):
        a = 2.5
        base = fit_corrected(toy_evs, variant="predicted")
        scaled = fit_corrected(_scale_exposure(toy_evs, a), variant="predicted")
        expect_alpha = base.alpha_fit.alpha * np.array([a, 1.0, a, 1.0, a])
        assert np.allclose(scaled.alpha_fit.alpha, expect_alpha, rtol=1e-8)
        expect_beta = base.beta * np.array([1.0, 1.0 / a, 1.0, 1.0 / a, 1.0])
        assert np.allclose(scaled.beta, expect_beta, rtol=1e-6)
        expect_se = base.se * np.array([1.0, 1.0 / a, 1.0, 1.0 / a, 1.0])
        assert np.allclose(scaled.se, expect_se, rtol=1e-6)


class TestIvsTrue:
    def test_requires_internal_design(self, toy_evs):
        with pytest.raises(DesignMismatch):
            fit_ivs_true(toy_evs)

    def test_no_measured_exposure_rejected(self, toy_ivs):
        validation = tuple(
            dataclasses.replace(
                p,
                true_exposure=np.full(p.n_points, np.nan),
                exposure_mask=np.zeros(p.n_points, dtype=bool),
            )
            for p in toy_ivs.validation
        )
        bare = Study(design="ivs", main=toy_ivs.main, validation=validation)
        with pytest.raises(DesignMismatch, match="no validation subject"):
            fit_ivs_true(bare)

    def test_single_point_matches_cross_sectional_logistic(self):
        study = build_toy_ivs(n_val=25, single=True)
        fit = fit_ivs_true(study, workcorr=WorkingCorrelation.ar1())
        functional = HistoryFunctional.cumavg()
        rows, ys = [], []
        for p in study.validation:
            mask = p.exposure_mask
            t = p.times[mask]
            rows.append(
                outcome_design(t, p.true_exposure[mask], p.covariates[mask], functional)
            )
            ys.append(p.outcome[mask])
        beta = newton_logistic(np.vstack(rows), np.concatenate(ys))
        assert fit.converged
        assert np.allclose(fit.beta, beta, atol=1e-8)

    def test_multi_point_uses_masked_subseries(self, toy_ivs):
        fit = fit_ivs_true(toy_ivs)
        assert fit.converged
        assert fit.beta.shape == (5,)
        assert np.all(np.isfinite(fit.se_robust))


class TestIvwCombine:
    def test_hand_algebra(self):
        fit_main = CorrectedFit(
            variant="predicted",
            beta=np.array([1.0, 2.0]),
            covariance=0.5 * np.eye(2),
            alpha_fit=None,
            wald_cis=np.zeros((2, 2)),
        )
        fit_ivs = SimpleNamespace(
            beta=np.array([2.0, 0.0]),
            cov_model=np.diag([0.25, 1.0]),
            converged=True,
        )
        out = ivw_combine(fit_main, fit_ivs)
        assert np.allclose(out.beta, [10.0 / 6.0, 4.0 / 3.0], atol=1e-12)
        assert np.allclose(out.covariance, np.diag([1.0 / 6.0, 1.0 / 3.0]), atol=1e-12)
        assert out.variant == "ivw"

    def test_combined_variance_no_larger_than_components(self, toy_ivs):
        # summing precisions can only tighten the estimate, so every
        # combined standard error is bounded by both component values
        combo = fit_corrected(toy_ivs, variant="ivw")
        se_m = np.asarray(combo.diagnostics["main"]["se"])
        se_i = np.asarray(combo.diagnostics["validation_only"]["se"])
        assert np.all(combo.se <= se_m + 1e-10)
        assert np.all(combo.se <= se_i + 1e-10)

    def test_dimension_mismatch(self):
        fit_main = CorrectedFit(
            variant="predicted",
            beta=np.array([1.0, 2.0]),
            covariance=np.eye(2),
            alpha_fit=None,
            wald_cis=np.zeros((2, 2)),
        )
        fit_ivs = SimpleNamespace(
            beta=np.array([1.0, 2.0, 3.0]),
            cov_model=np.eye(3),
            converged=True,
        )
        with pytest.raises(DimensionMismatch):
            ivw_combine(fit_main, fit_ivs)

    def test_singular_variance(self):
        fit_main = CorrectedFit(
            variant="predicted",
            beta=np.array([1.0]),
            covariance=np.zeros((1, 1)),
            alpha_fit=None,
            wald_cis=np.zeros((1, 2)),
        )
        fit_ivs = SimpleNamespace(
            beta=np.array([1.0]),
            cov_model=np.eye(1),
            converged=True,
        )
        with pytest.raises(SingularVariance):
            ivw_combine(fit_main, fit_ivs)


class TestUncorrected:
    def test_matches_direct_gee(self, toy_evs):
        fit = fit_uncorrected(toy_evs)
        functional = HistoryFunctional.cumavg()
        panels = [
            (outcome_design(p.times, p.surrogate, p.covariates, functional), p.outcome)
            for p in toy_evs.main
        ]
        gfit = solve_gee(
            panels, Link.logit(), "binomial",
            WorkingCorrelation.independence(), 1e-8, 100,
        )
        assert np.allclose(fit.beta, gfit.beta, atol=1e-12)
        assert np.allclose(fit.covariance, gfit.cov_robust, atol=1e-12)

    def test_ivs_pool_adds_validation_outcomes(self, toy_ivs):
        fit = fit_uncorrected(toy_ivs)
        n = len(toy_ivs.main) + len(toy_ivs.validation)
        assert fit.diagnostics["outcome"]["n_subjects"] == n
