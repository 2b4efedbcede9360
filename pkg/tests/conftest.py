"""Shared oracles and small study builders for the test suite.

Oracles are independent re-implementations (Newton logistic MLE, normal
equations) used to pin the estimation code to closed-form or textbook
results. Study builders produce small, seeded datasets with known
generating parameters.
"""

import numpy as np
import pytest
from scipy.special import expit

from memgee import SubjectPanel, Study
from memgee.numkit import solve_linear_system


# ---------------------------------------------------------------------------
# oracles

def newton_logistic(x: np.ndarray, y: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Logistic MLE by full Newton-Raphson on the log-likelihood."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    beta = np.zeros(x.shape[1])
    for _ in range(60):
        p = expit(x @ beta)
        grad = x.T @ (y - p)
        hess = x.T @ (x * (p * (1.0 - p))[:, None])
        step = solve_linear_system(hess, grad)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            break
    return beta


def ols_solve(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Normal-equation least squares."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return solve_linear_system(x.T @ x, x.T @ y)


def cluster_logistic_sandwich(x_blocks, y_blocks, beta) -> np.ndarray:
    """Independence-working sandwich covariance for a logistic fit.

    Hand-rolled: meat is the uncentered sum of per-cluster score outer
    products; bread is the observed score Jacobian, which for the
    canonical logit score X'(y - p) adds the curvature-times-residual
    term -(1 - 2p)(y - p) to the information weights.
    """
    k = beta.shape[0]
    bread = np.zeros((k, k))
    meat = np.zeros((k, k))
    for xb, yb in zip(x_blocks, y_blocks):
        p = expit(xb @ beta)
        score = xb.T @ (yb - p)
        w = p * (1.0 - p) - (1.0 - 2.0 * p) * (yb - p)
        bread += xb.T @ (xb * w[:, None])
        meat += np.outer(score, score)
    binv = np.linalg.inv(bread)
    return binv @ meat @ binv.T


# ---------------------------------------------------------------------------
# study builders

ALPHA_TOY = np.array([0.5, 0.8, 0.2, 0.1, 0.3])
BETA_TOY = np.array([-0.5, 0.4, 0.2, -0.1, 0.3])


def _toy_panel(rng, subject_id, m, *, outcome, measured, alpha=ALPHA_TOY,
               beta=BETA_TOY, noise_sd=0.35):
    """One subject with correlated surrogate/covariate series.

    ``measured`` is a boolean mask (or scalar bool) saying where the true
    exposure is recorded; the true exposure is generated everywhere and
    then hidden outside the mask, exactly as a validation design would.
    """
    times = np.sort(rng.uniform(0.0, 4.0, size=m))
    while m > 1 and np.min(np.diff(times)) < 0.05:
        times = np.sort(rng.uniform(0.0, 4.0, size=m))
    z = rng.standard_normal((m, 2))
    surrogate = z[:, 0]
    w = 0.4 * z[:, 0] + np.sqrt(1.0 - 0.16) * z[:, 1]
    covs = w.reshape(m, 1)
    c_true = (
        alpha[0] + alpha[1] * surrogate + alpha[2] * times
        + alpha[3] * surrogate * times + alpha[4] * w
        + noise_sd * rng.standard_normal(m)
    )
    mask = np.broadcast_to(np.asarray(measured, dtype=bool), (m,)).copy()
    y = None
    if outcome:
        s = np.cumsum(c_true) / np.arange(1, m + 1)
        eta = beta[0] + beta[1] * s + beta[2] * times + beta[3] * s * times + beta[4] * w
        y = (rng.uniform(size=m) < expit(eta)).astype(float)
    return SubjectPanel(
        subject_id=subject_id,
        times=times,
        surrogate=surrogate,
        covariates=covs,
        outcome=y,
        true_exposure=c_true,
        exposure_mask=mask,
    )


def build_toy_evs(seed: int = 20260811) -> Study:
    """Seven subjects: four main with outcomes, three external validation."""
    rng = np.random.default_rng(seed)
    main = tuple(
        _toy_panel(rng, f"m{i}", 5, outcome=True, measured=False) for i in range(4)
    )
    validation = tuple(
        _toy_panel(rng, f"v{i}", m, outcome=False, measured=True)
        for i, m in enumerate((4, 5, 3))
    )
    return Study(design="evs", main=main, validation=validation)


def build_toy_ivs(seed: int = 20260812, n_main: int = 6, n_val: int = 4,
                  single: bool = False) -> Study:
    """Internal design: validation subjects carry outcomes too."""
    rng = np.random.default_rng(seed)
    main = tuple(
        _toy_panel(rng, f"m{i}", 5, outcome=True, measured=False)
        for i in range(n_main)
    )
    validation = []
    for i in range(n_val):
        m = 5
        if single:
            mask = np.zeros(m, dtype=bool)
            mask[int(rng.integers(m))] = True
        else:
            mask = np.ones(m, dtype=bool)
        validation.append(_toy_panel(rng, f"v{i}", m, outcome=True, measured=mask))
    return Study(design="ivs", main=main, validation=tuple(validation))


def build_identity_study(design: str = "ivs", seed: int = 20260813,
                         n_main: int = 30, n_val: int = 12) -> Study:
    """Validation subjects whose true exposure equals the surrogate exactly."""
    rng = np.random.default_rng(seed)
    main = tuple(
        _toy_panel(rng, f"m{i}", 5, outcome=True, measured=False)
        for i in range(n_main)
    )
    validation = []
    for i in range(n_val):
        p = _toy_panel(rng, f"v{i}", 5, outcome=(design == "ivs"), measured=True)
        validation.append(
            SubjectPanel(
                subject_id=p.subject_id,
                times=p.times,
                surrogate=p.surrogate,
                covariates=p.covariates,
                outcome=p.outcome,
                true_exposure=p.surrogate.copy(),
                exposure_mask=np.ones(p.n_points, dtype=bool),
            )
        )
    return Study(design=design, main=main, validation=tuple(validation))


@pytest.fixture
def toy_evs() -> Study:
    return build_toy_evs()


@pytest.fixture
def toy_ivs() -> Study:
    return build_toy_ivs()
