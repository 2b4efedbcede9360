"""Measurement-error-corrected GEE estimation for longitudinal exposures.

The package fits marginal regression models for discrete longitudinal
outcomes when the exposure of interest is an error-prone time-varying
quantity observed only through a surrogate, with the true exposure
available in an internal or external validation study. Estimation is a
two-step regression calibration: a linear measurement error model fitted
on the validation data, followed by a GEE for the outcome with the
calibrated exposure history plugged in, and a stacked sandwich variance
that propagates the first-step uncertainty.

Subpackage map:

- :mod:`memgee.numkit` -- numerical primitives (solves, MVN, RNG, Jacobian)
- :mod:`memgee.dataset` -- study containers, long-format CSV I/O, validation
- :mod:`memgee.exposure` -- exposure-history functionals and calibration
- :mod:`memgee.mem` -- measurement error model fits and diagnostics
- :mod:`memgee.gee` -- the GEE solver, links, working correlations
- :mod:`memgee.correct` -- corrected estimators and sandwich variances
- :mod:`memgee.simlab` -- scenario definitions and the Monte Carlo harness
- :mod:`memgee.cli` -- the ``memgee`` command line interface
"""

from . import errors
from .dataset import Study, SubjectPanel, load_long_csv, validate_study, write_long_csv
from .exposure import (
    HistoryFunctional,
    cumulative_average,
    moving_average,
    predict_true_exposure,
)
from .gee import GeeFit, Link, WorkingCorrelation, estimate_rho, solve_gee, taylor_mean_check
from .mem import (
    MemFit,
    approximation_diagnostic,
    fit_mem_gee,
    fit_mem_ols,
    localized_error_test,
)
from .correct import (
    CorrectedFit,
    SandwichParts,
    fit_corrected,
    fit_ivs_true,
    fit_uncorrected,
    ivw_combine,
    sandwich_variance,
)
from .simlab import (
    MetricsReport,
    Scenario,
    gen_panel,
    gen_binary_outcomes,
    metrics,
    misspecified_mem_scenario,
    run_replicates,
)

__version__ = "0.1.0"

__all__ = [
    "errors",
    "Study",
    "SubjectPanel",
    "load_long_csv",
    "write_long_csv",
    "validate_study",
    "HistoryFunctional",
    "cumulative_average",
    "moving_average",
    "predict_true_exposure",
    "Link",
    "WorkingCorrelation",
    "GeeFit",
    "solve_gee",
    "estimate_rho",
    "taylor_mean_check",
    "MemFit",
    "fit_mem_ols",
    "fit_mem_gee",
    "localized_error_test",
    "approximation_diagnostic",
    "CorrectedFit",
    "SandwichParts",
    "fit_corrected",
    "fit_uncorrected",
    "fit_ivs_true",
    "ivw_combine",
    "sandwich_variance",
    "Scenario",
    "MetricsReport",
    "gen_panel",
    "gen_binary_outcomes",
    "run_replicates",
    "metrics",
    "misspecified_mem_scenario",
]
