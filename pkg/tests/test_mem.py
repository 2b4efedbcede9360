"""Calibration model: OLS/GEE fits, lag test, approximation diagnostic."""

import numpy as np
import pytest

from memgee import (
    HistoryFunctional,
    Study,
    SubjectPanel,
    WorkingCorrelation,
    approximation_diagnostic,
    fit_mem_gee,
    fit_mem_ols,
    localized_error_test,
)
from memgee.errors import (
    InsufficientLags,
    LengthMismatch,
    RankDeficientDesign,
    TooFewSubjects,
)
from memgee.exposure import predict_true_exposure
from memgee.mem import mem_design, mem_design_labels

from conftest import ALPHA_TOY, build_toy_evs, build_toy_ivs, ols_solve


def single_point_study(n=60, seed=5, alpha=ALPHA_TOY, noise_sd=0.4, rho_cw=0.4):
    """Validation subjects with one measured point each, known alpha."""
    rng = np.random.default_rng(seed)
    panels = []
    for i in range(n):
        t = rng.uniform(0.0, 4.0)
        z = rng.standard_normal(2)
        surr = z[0]
        w = rho_cw * z[0] + np.sqrt(1.0 - rho_cw**2) * z[1]
        c = (
            alpha[0] + alpha[1] * surr + alpha[2] * t + alpha[3] * surr * t
            + alpha[4] * w + noise_sd * rng.standard_normal()
        )
        panels.append(
            SubjectPanel(
                subject_id=f"v{i}",
                times=np.array([t]),
                surrogate=np.array([surr]),
                covariates=np.array([[w]]),
                true_exposure=np.array([c]),
                exposure_mask=np.array([True]),
            )
        )
    return Study(design="evs", main=(), validation=tuple(panels))


class TestMemDesign:
    def test_columns(self):
        surr = np.array([1.0, 2.0])
        times = np.array([0.5, 1.5])
        covs = np.array([[3.0], [4.0]])
        z = mem_design(surr, times, covs)
        assert z.shape == (2, 5)
        assert z[1].tolist() == [1.0, 2.0, 1.5, 3.0, 4.0]
        z0 = mem_design(surr, times, covs, interaction=False)
        assert z0.shape == (2, 4)
        assert z0[1].tolist() == [1.0, 2.0, 1.5, 4.0]

    def test_labels(self):
        assert mem_design_labels(1) == ["intercept", "surrogate", "time",
                                        "surrogate:time", "W1"]
        assert mem_design_labels(2, interaction=False) == [
            "intercept", "surrogate", "time", "W1", "W2"
        ]


class TestFitMemOls:
    def test_noiseless_identity_recovers_unit_map(self):
        study = single_point_study(noise_sd=0.0, alpha=np.array([0.0, 1.0, 0.0, 0.0, 0.0]))
        fit = fit_mem_ols(study)
        assert np.max(np.abs(fit.alpha - np.array([0.0, 1.0, 0.0, 0.0, 0.0]))) < 1e-10
        assert fit.residual_variance < 1e-20

    def test_matches_normal_equations(self):
        study = single_point_study()
        fit = fit_mem_ols(study)
        z = np.vstack(
            [mem_design(p.surrogate, p.times, p.covariates) for p in study.validation]
        )
        c = np.concatenate([p.true_exposure for p in study.validation])
        oracle = ols_solve(z, c)
        assert np.max(np.abs(fit.alpha - oracle)) < 1e-10
        resid = c - z @ oracle
        assert fit.residual_variance == pytest.approx(
            float(resid @ resid) / (len(c) - 5), rel=1e-10
        )

    def test_recovers_generating_alpha(self):
        study = single_point_study(n=4000, seed=6)
        fit = fit_mem_ols(study)
        assert np.max(np.abs(fit.alpha - ALPHA_TOY)) < 0.1
        assert fit.residual_variance == pytest.approx(0.16, abs=0.02)

    def test_predict_matches_calibration_formula(self):
        study = single_point_study()
        fit = fit_mem_ols(study)
        p = study.validation[0]
        direct = predict_true_exposure(fit.alpha, p.surrogate, p.times, p.covariates)
        assert np.allclose(fit.predict(p.surrogate, p.times, p.covariates), direct)

    def test_bread_rows_sum_to_bread(self):
        study = single_point_study()
        fit = fit_mem_ols(study)
        assert np.allclose(fit.bread_rows.sum(axis=0), fit.bread, atol=1e-10)
        assert fit.n_subjects == 60 and fit.n_points == 60

    def test_multi_point_subject_rejected(self):
        study = build_toy_evs()
        with pytest.raises(ValueError, match="measured points"):
            fit_mem_ols(study)

    def test_too_few_subjects(self):
        study = single_point_study(n=5)
        with pytest.raises(TooFewSubjects):
            fit_mem_ols(study)

    def test_se_positive(self):
        fit = fit_mem_ols(single_point_study())
        assert np.all(fit.se > 0)


class TestFitMemGee:
    def test_independence_equals_pooled_least_squares(self):
        study = build_toy_evs()
        fit = fit_mem_gee(study, WorkingCorrelation.independence())
        z, c = [], []
        for p in study.validation:
            z.append(mem_design(p.surrogate, p.times, p.covariates))
            c.append(p.true_exposure)
        oracle = ols_solve(np.vstack(z), np.concatenate(c))
        assert np.max(np.abs(fit.alpha - oracle)) < 1e-8

    def test_default_workcorr_is_independence(self):
        study = build_toy_evs()
        a = fit_mem_gee(study)
        b = fit_mem_gee(study, WorkingCorrelation.independence())
        assert np.array_equal(a.alpha, b.alpha)
        assert a.workcorr_kind == "independence"

    def test_exchangeable_estimates_rho_and_converges(self):
        study = build_toy_ivs(n_main=0, n_val=40)
        fit = fit_mem_gee(study, WorkingCorrelation.exchangeable())
        assert -0.99 <= fit.rho <= 0.99
        assert fit.workcorr_kind == "exchangeable"
        # weighted estimating equation solved at alpha-hat
        assert np.max(np.abs(fit.scores.sum(axis=0))) < 1e-8

    def test_pinned_rho_used_without_iteration(self):
        study = build_toy_ivs(n_main=0, n_val=30)
        fit = fit_mem_gee(study, WorkingCorrelation.ar1(0.3))
        assert fit.rho == 0.3

    def test_interaction_flag_shrinks_design(self):
        study = build_toy_evs()
        fit = fit_mem_gee(study, interaction=False)
        assert fit.alpha.shape == (4,)
        assert fit.design_labels == ["intercept", "surrogate", "time", "W1"]

    def test_rank_deficiency_detected(self):
        study = single_point_study(n=30)
        frozen = []
        for p in study.validation:
            frozen.append(
                SubjectPanel(
                    subject_id=p.subject_id,
                    times=np.array([2.0]),  # same time for everyone
                    surrogate=p.surrogate,
                    covariates=p.covariates,
                    true_exposure=p.true_exposure,
                    exposure_mask=p.exposure_mask,
                )
            )
        bad = Study(design="evs", main=(), validation=tuple(frozen))
        with pytest.raises(RankDeficientDesign):
            fit_mem_gee(bad)

    def test_no_measured_points_rejected(self):
        study = Study(design="evs", main=(), validation=())
        with pytest.raises(TooFewSubjects):
            fit_mem_gee(study)


class TestLocalizedErrorTest:
    def test_null_data_gives_moderate_p(self):
        # generated under the base model: the lag column adds nothing
        study = build_toy_ivs(n_main=0, n_val=60, seed=7)
        res = localized_error_test(study)
        assert res.df[0] == 1
        assert res.df[1] == 60 * 4 - 6
        assert 0.0 <= res.p_value <= 1.0
        assert res.f_stat >= 0.0

    def test_null_rejection_rate_near_level(self):
        hits = 0
        n_rep = 40
        for s in range(n_rep):
            study = build_toy_ivs(n_main=0, n_val=40, seed=1000 + s)
            if localized_error_test(study).p_value < 0.05:
                hits += 1
        assert hits <= 8  # near the nominal level, far from power one

    def test_detects_strong_lag_dependence(self):
        rng = np.random.default_rng(8)
        panels = []
        for i in range(50):
            m = 5
            times = np.sort(rng.uniform(0, 4, size=m))
            surr = rng.standard_normal(m)
            w = rng.standard_normal((m, 1))
            lagmean = np.array(
                [surr[0] if j == 0 else surr[:j].mean() for j in range(m)]
            )
            c = 0.5 + 0.6 * surr + 1.0 * lagmean + 0.1 * rng.standard_normal(m)
            panels.append(
                SubjectPanel(
                    subject_id=f"v{i}", times=times, surrogate=surr,
                    covariates=w, true_exposure=c,
                    exposure_mask=np.ones(m, dtype=bool),
                )
            )
        study = Study(design="evs", main=(), validation=tuple(panels))
        assert localized_error_test(study).p_value < 0.01

    def test_single_measurements_rejected(self):
        study = single_point_study()
        # single measured points can sit at j=0 or have no usable history
        with pytest.raises(InsufficientLags):
            localized_error_test(
                Study(
                    design="evs",
                    main=(),
                    validation=tuple(
                        SubjectPanel(
                            subject_id=p.subject_id,
                            times=p.times,
                            surrogate=p.surrogate,
                            covariates=p.covariates,
                            true_exposure=p.true_exposure,
                            exposure_mask=p.exposure_mask,
                        )
                        for p in study.validation
                    ),
                )
            )


class TestApproximationDiagnostic:
    def test_zero_residual_variance_gives_zero(self):
        study = build_toy_evs()
        fit = fit_mem_gee(study)
        fit.residual_variance = 0.0
        beta = np.array([0.1, 0.5, -0.2, 0.3, 0.0])
        assert approximation_diagnostic(fit, beta, study) == 0.0

    def test_matches_hand_computation(self):
        study = build_toy_evs()
        fit = fit_mem_gee(study)
        beta = np.array([0.0, 0.5, 0.0, -0.25, 0.0])
        functional = HistoryFunctional.cumavg()
        total, count = 0.0, 0
        for p in study.main:
            w = functional.weights(p.times)
            var_s = fit.residual_variance * (w**2).sum(axis=1)
            slope = beta[1] + beta[3] * p.times
            total += float((var_s * slope**2).sum())
            count += p.n_points
        got = approximation_diagnostic(fit, beta, study)
        assert got == pytest.approx(total / count, rel=1e-12)
        assert got > 0.0

    def test_scales_with_residual_variance(self):
        study = build_toy_evs()
        fit = fit_mem_gee(study)
        beta = np.array([0.0, 0.5, 0.0, -0.25, 0.0])
        base = approximation_diagnostic(fit, beta, study)
        fit.residual_variance *= 4.0
        assert approximation_diagnostic(fit, beta, study) == pytest.approx(
            4.0 * base, rel=1e-12
        )

    def test_beta_length_checked(self):
        study = build_toy_evs()
        fit = fit_mem_gee(study)
        with pytest.raises(LengthMismatch):
            approximation_diagnostic(fit, np.zeros(4), study)

    def test_no_main_points_rejected(self):
        study = build_toy_evs()
        fit = fit_mem_gee(study)
        empty = Study(design="evs", main=(), validation=study.validation)
        with pytest.raises(LengthMismatch):
            approximation_diagnostic(fit, np.zeros(5), empty)
