"""Simulation scenarios, data generation, and the replicate harness.

The data-generating process draws a five-visit panel per subject: visit
times on a unit grid with a uniform start, a joint Gaussian surrogate
and covariate series, a true exposure from the linear calibration model
with per-visit noise variances solved so the surrogate-truth correlation
hits the scenario target, and correlated binary outcomes from a
latent-Gaussian copula with exact marginals.

Determinism contract: every subject owns a counter-based stream keyed by
(replicate seed, subject index), and all batched math is elementwise or
reduces over the trailing axis only, so generating one subject and
generating the whole study produce bitwise-identical panels. Replicates
parallelize across processes; aggregation is ordered by replicate index,
which makes reports invariant to the worker count.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr, ndtri

from .correct import (
    VARIANT_UNCORRECTED,
    VARIANTS,
    Z95,
    fit_corrected,
    fit_uncorrected,
)
from .dataset import DESIGN_EVS, DESIGN_IVS, Study, SubjectPanel
from .errors import (
    AllReplicatesFailed,
    InfeasibleCorrelation,
    LengthMismatch,
    MemgeeError,
)
from .exposure import HistoryFunctional
from .gee import Link, WorkingCorrelation
from .numkit import RngStream, mvn_factor

logger = logging.getLogger(__name__)

MEASURE_SINGLE = "single"
MEASURE_ALL = "all"
MEM_FULL = "full"
MEM_NO_INTERACTION = "no-interaction"

_BISECT_ITERS = 21  # halves a width-2 interval below 1e-6
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(32)


# ---------------------------------------------------------------------------
# scenario

@dataclass(frozen=True)
class Scenario:
    """Complete specification of one simulation setting.

    ``alpha_true`` is (intercept, surrogate, time, surrogate*time,
    covariate) for the calibration model; ``beta_true`` is (intercept,
    exposure, time, exposure*time, covariate) for the outcome model. The
    covariate is a scalar time-varying series drawn jointly with the
    surrogate. ``target_cor`` is the per-visit correlation between true
    and surrogate exposure that the noise variances are solved against.
    """

    n1: int
    n2: int
    replicates: int
    base_seed: int
    design: str
    validation_measurements: str
    alpha_true: tuple[float, ...]
    beta_true: tuple[float, ...]
    target_cor: float
    outcome_corr: float = 0.1
    mem_spec: str = MEM_FULL
    workcorr_outcome: str = "ar1"
    workcorr_mem: str = "ar1"
    n_visits: int = 5
    cor_c: float = 0.6
    cor_w: float = 0.2
    cross_cov: float = 0.4

    def __post_init__(self) -> None:
        object.__setattr__(self, "alpha_true", tuple(float(a) for a in self.alpha_true))
        object.__setattr__(self, "beta_true", tuple(float(b) for b in self.beta_true))
        if self.design not in (DESIGN_IVS, DESIGN_EVS):
            raise ValueError(f"design must be 'ivs' or 'evs', got {self.design!r}")
        if self.validation_measurements not in (MEASURE_SINGLE, MEASURE_ALL):
            raise ValueError(
                f"validation_measurements must be 'single' or 'all', "
                f"got {self.validation_measurements!r}"
            )
        if self.mem_spec not in (MEM_FULL, MEM_NO_INTERACTION):
            raise ValueError(f"mem_spec must be 'full' or 'no-interaction', got {self.mem_spec!r}")
        if not 0.0 < self.target_cor < 1.0:
            raise ValueError(f"target_cor must be in (0, 1), got {self.target_cor}")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.n1 < 1 or self.n2 < 0:
            raise ValueError("n1 must be positive and n2 non-negative")
        if len(self.alpha_true) != 5 or len(self.beta_true) != 5:
            raise ValueError("alpha_true and beta_true must each have five entries")
        if not -1.0 < self.outcome_corr < 1.0:
            raise ValueError(f"outcome_corr must be in (-1, 1), got {self.outcome_corr}")
        if self.n_visits < 1:
            raise ValueError("n_visits must be at least 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["alpha_true"] = list(self.alpha_true)
        d["beta_true"] = list(self.beta_true)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**data)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
            handle.write("\n")

    @classmethod
    def from_json(cls, path) -> "Scenario":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_dict(json.load(handle))

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)


def misspecified_mem_scenario(scenario: Scenario) -> Scenario:
    """Copy of the scenario whose fits drop the surrogate-by-time column.

    The data-generating process keeps its interaction coefficient, so
    downstream calibration fits are misspecified. Idempotent.
    """
    return scenario.replace(mem_spec=MEM_NO_INTERACTION)


# ---------------------------------------------------------------------------
# exposure-noise calibration

def exposure_covariance(scenario: Scenario) -> np.ndarray:
    """Joint covariance of the surrogate and covariate series.

    Both series have unit variance with AR(1) correlation across visits;
    the two series are linked only contemporaneously, with covariance
    ``cross_cov`` at equal visits.
    """
    m = scenario.n_visits
    idx = np.arange(m)
    lag = np.abs(idx[:, None] - idx[None, :])
    v = np.zeros((2 * m, 2 * m))
    v[:m, :m] = scenario.cor_c**lag
    v[m:, m:] = scenario.cor_w**lag
    cross = scenario.cross_cov * np.eye(m)
    v[:m, m:] = cross
    v[m:, :m] = cross
    return v


def _visit_time_means(n_visits: int) -> np.ndarray:
    # t_j = U(0,1) + j, so E t_j = j + 0.5 and Var t_j = 1/12
    return np.arange(n_visits) + 0.5


def _noise_free_moments(scenario: Scenario):
    """Per-visit Cov(c, C) and noise-free Var(c), marginal over the
    random visit times."""
    _, a, b, d, e = scenario.alpha_true
    q = scenario.cross_cov
    m = _visit_time_means(scenario.n_visits)
    cov_c_surr = a + d * m + q * e
    var0 = (
        a * a
        + b * b / 12.0
        + d * d * (m * m + 1.0 / 12.0)
        + 2.0 * a * d * m
        + e * e
        + 2.0 * q * e * (a + d * m)
    )
    return cov_c_surr, var0


def max_feasible_cor(scenario: Scenario) -> np.ndarray:
    """Per-visit Cor(c, C) attained with zero calibration noise."""
    cov, var0 = _noise_free_moments(scenario)
    return cov / np.sqrt(var0)


def solve_sigma_eps(scenario: Scenario) -> np.ndarray:
    """Per-visit noise variances hitting the target Cor(c, C) exactly.

    Cor(c_j, C_j) = Cov_j / sqrt(Var0_j + sigma2_j) with unit surrogate
    variance, so each visit solves in closed form.

    Raises
    ------
    InfeasibleCorrelation
        If the target exceeds the zero-noise correlation at some visit.
    """
    cov, var0 = _noise_free_moments(scenario)
    sigma2 = (cov / scenario.target_cor) ** 2 - var0
    if np.any(sigma2 < 0.0):
        worst = float(np.min(cov / np.sqrt(var0)))
        raise InfeasibleCorrelation(
            f"target correlation {scenario.target_cor} exceeds the zero-noise "
            f"maximum {worst:.4f} at some visit"
        )
    return sigma2


# ---------------------------------------------------------------------------
# bivariate normal CDF and the binary copula

def bvn_cdf(h, k, rho):
    """Standard bivariate normal CDF P(X <= h, Y <= k) with correlation rho.

    Single-integral form reduced over the trailing quadrature axis only,
    so results are bitwise-stable under batching. Accurate to roughly
    1e-12 for |rho| <= 0.99.
    """
    h = np.asarray(h, dtype=float)
    k = np.asarray(k, dtype=float)
    rho = np.asarray(rho, dtype=float)
    r = rho[..., None] * (_GL_NODES + 1.0) / 2.0
    omr2 = 1.0 - r * r
    hh = h[..., None]
    kk = k[..., None]
    dens = np.exp(-(hh * hh - 2.0 * r * hh * kk + kk * kk) / (2.0 * omr2)) / np.sqrt(omr2)
    integral = (rho / 2.0) * np.sum(_GL_WEIGHTS * dens, axis=-1)
    return ndtr(h) * ndtr(k) + integral / (2.0 * math.pi)


def _solve_latent_rho(h1, h2, target):
    """Bisect the latent correlation so the joint orthant mass hits target."""
    lo = np.full_like(target, -1.0 + 1e-9)
    hi = np.full_like(target, 1.0 - 1e-9)
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        too_low = bvn_cdf(h1, h2, mid) < target
        lo = np.where(too_low, mid, lo)
        hi = np.where(too_low, hi, mid)
    return 0.5 * (lo + hi)


def _binary_from_draws(p: np.ndarray, lag_corr: float, z: np.ndarray) -> np.ndarray:
    """Correlated binary rows from standard-normal draws.

    ``p`` and ``z`` are (batch, m). Marginals are exact by construction;
    adjacent pairs target the requested Pearson correlation through a
    latent Markov chain whose pairwise correlations are solved
    numerically, after clipping each pair's joint success probability to
    its feasible range (clipping is logged).
    """
    p = np.asarray(p, dtype=float)
    z = np.asarray(z, dtype=float)
    n, m = p.shape
    h = ndtri(p)
    if m == 1 or lag_corr == 0.0:
        return (z <= h).astype(float)
    p1, p2 = p[:, :-1], p[:, 1:]
    joint = p1 * p2 + lag_corr * np.sqrt(p1 * (1 - p1) * p2 * (1 - p2))
    lower = np.maximum(0.0, p1 + p2 - 1.0)
    upper = np.minimum(p1, p2)
    clipped = int(np.sum((joint < lower) | (joint > upper)))
    if clipped:
        # routine at extreme marginals, so logged below warning level
        logger.debug(
            "clipped %d adjacent joint probabilities to the feasible range", clipped
        )
    joint = np.clip(joint, lower, upper)
    rho = _solve_latent_rho(h[:, :-1], h[:, 1:], joint)
    latent = np.empty_like(z)
    latent[:, 0] = z[:, 0]
    for j in range(1, m):
        r = rho[:, j - 1]
        latent[:, j] = r * latent[:, j - 1] + np.sqrt(1.0 - r * r) * z[:, j]
    return (latent <= h).astype(float)


def gen_binary_outcomes(marginal_means, lag_corr: float, rng) -> np.ndarray:
    """Binary vector with the given marginal means and adjacent correlation.

    Parameters
    ----------
    marginal_means : array-like, shape (m,)
        Each in (0, 1).
    lag_corr : float
        Target Pearson correlation of adjacent pairs; infeasible targets
        clip to the Frechet bounds with a log record.
    rng : RngStream or numpy Generator
    """
    p = np.atleast_1d(np.asarray(marginal_means, dtype=float))
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("marginal means must lie strictly inside (0, 1)")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    z = gen.standard_normal(p.shape[0])
    return _binary_from_draws(p[None, :], lag_corr, z[None, :])[0]


# ---------------------------------------------------------------------------
# panel generation

def _draw_subject(gen, m: int):
    """Fixed per-subject draw order; every role consumes the same stream."""
    t1 = gen.random()
    zcw = gen.standard_normal(2 * m)
    zeps = gen.standard_normal(m)
    u = gen.random(m)
    zy = gen.standard_normal(m)
    return t1, zcw, zeps, u, zy


def _simulate_arrays(scenario: Scenario, t1, zcw, zeps, u, zy):
    """Batch panel math shared by single-subject and whole-study paths.

    All operations are elementwise or reduce over the trailing axis, so
    each row is bitwise-independent of the batch it rides in.
    """
    m = scenario.n_visits
    times = t1[:, None] + np.arange(m, dtype=float)
    factor = mvn_factor(exposure_covariance(scenario))
    cw = np.einsum("nk,jk->nj", zcw, factor, optimize=False)
    surr = cw[:, :m]
    w = cw[:, m:]
    a0, a, b, d, e = scenario.alpha_true
    sig = np.sqrt(solve_sigma_eps(scenario))
    c = a0 + a * surr + b * times + d * surr * times + e * w + zeps * sig
    s = np.empty_like(c)
    s[:, 0] = c[:, 0]
    if m > 1:
        dt = np.diff(times, axis=1)
        s[:, 1:] = np.cumsum(dt * c[:, :-1], axis=1) / (times[:, 1:] - times[:, :1])
    b0, b1, b2, b3, b4 = scenario.beta_true
    eta = b0 + b1 * s + b2 * times + b3 * s * times + b4 * w
    p = expit(eta)
    y = _binary_from_draws(p, scenario.outcome_corr, zy)
    jstar = np.sum(u < u[:, :1], axis=1)
    return {"times": times, "surr": surr, "w": w, "c": c, "y": y, "jstar": jstar}


def _build_panel(scenario: Scenario, subject_index: int, arrays: dict, row: int) -> SubjectPanel:
    m = scenario.n_visits
    is_main = subject_index < scenario.n1
    times = arrays["times"][row]
    surr = arrays["surr"][row]
    covs = arrays["w"][row].reshape(m, 1)
    if is_main:
        outcome = arrays["y"][row]
        true_exposure = None
        mask = np.zeros(m, dtype=bool)
    else:
        outcome = arrays["y"][row] if scenario.design == DESIGN_IVS else None
        true_exposure = arrays["c"][row]
        if scenario.validation_measurements == MEASURE_SINGLE:
            mask = np.zeros(m, dtype=bool)
            mask[int(arrays["jstar"][row])] = True
        else:
            mask = np.ones(m, dtype=bool)
    return SubjectPanel(
        subject_id=f"s{subject_index:06d}",
        times=times,
        surrogate=surr,
        covariates=covs,
        outcome=outcome,
        true_exposure=true_exposure,
        exposure_mask=mask,
    )


def gen_panel(scenario: Scenario, subject_index: int, rng: RngStream) -> SubjectPanel:
    """Generate one subject's panel.

    Subjects with index below ``n1`` are main-study subjects;
    the rest are validation subjects, masked per the scenario's
    measurement scheme. Every subject consumes the same amount of
    randomness from its stream regardless of role, and the same
    (seed, subject index) always yields the same panel, whether drawn
    alone or as part of a whole study.
    """
    gen = rng.generator()
    t1, zcw, zeps, u, zy = _draw_subject(gen, scenario.n_visits)
    arrays = _simulate_arrays(
        scenario,
        np.array([t1]),
        zcw[None, :],
        zeps[None, :],
        u[None, :],
        zy[None, :],
    )
    return _build_panel(scenario, subject_index, arrays, 0)


def gen_study(scenario: Scenario, rep_seed: int) -> Study:
    """Generate a full study: ``n1`` main plus ``n2`` validation subjects."""
    n = scenario.n1 + scenario.n2
    m = scenario.n_visits
    t1 = np.empty(n)
    zcw = np.empty((n, 2 * m))
    zeps = np.empty((n, m))
    u = np.empty((n, m))
    zy = np.empty((n, m))
    for i in range(n):
        gen = RngStream(seed=rep_seed, stream_id=i).generator()
        t1[i], zcw[i], zeps[i], u[i], zy[i] = _draw_subject(gen, m)
    arrays = _simulate_arrays(scenario, t1, zcw, zeps, u, zy)
    panels = [_build_panel(scenario, i, arrays, i) for i in range(n)]
    return Study(
        design=scenario.design,
        main=tuple(panels[: scenario.n1]),
        validation=tuple(panels[scenario.n1 :]),
    )


# ---------------------------------------------------------------------------
# metrics

COEF_NAMES = ("intercept", "exposure", "time", "exposure:time", "W1")


def metrics(estimates, ses, truth: float) -> dict:
    """Replicate summary for one coefficient.

    rbias is a fraction of the truth; ase averages reported standard
    errors; ese is the sample standard deviation of the estimates (absent
    with a single replicate); cp is the fraction of 95 percent Wald
    intervals covering the truth.

    Raises
    ------
    LengthMismatch
        If the estimate and SE vectors differ in length or are empty.
    """
    est = np.asarray(estimates, dtype=float)
    se = np.asarray(ses, dtype=float)
    if est.shape != se.shape or est.ndim != 1 or est.shape[0] < 1:
        raise LengthMismatch(
            f"estimates {est.shape} and ses {se.shape} must be equal-length 1-d"
        )
    rbias = float((est.mean() - truth) / truth) if truth != 0.0 else math.nan
    ase = float(se.mean())
    ese = float(np.std(est, ddof=1)) if est.shape[0] > 1 else None
    lo = est - Z95 * se
    hi = est + Z95 * se
    cp = float(np.mean((lo <= truth) & (truth <= hi)))
    return {"rbias": rbias, "ase": ase, "ese": ese, "cp": cp}


@dataclass
class MetricsReport:
    """Aggregated replicate metrics for one estimator."""

    estimator: str
    coef_names: tuple[str, ...]
    truth: tuple[float, ...]
    rbias: tuple[float, ...]
    ase: tuple[float, ...]
    ese: tuple[float, ...] | None
    cp: tuple[float, ...]
    n_replicates: int
    n_used: int
    n_failed: int
    scenario: dict

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "coef_names": list(self.coef_names),
            "truth": list(self.truth),
            "rbias": list(self.rbias),
            "ase": list(self.ase),
            "ese": None if self.ese is None else list(self.ese),
            "cp": list(self.cp),
            "n_replicates": self.n_replicates,
            "n_used": self.n_used,
            "n_failed": self.n_failed,
            "scenario": self.scenario,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(
            estimator=data["estimator"],
            coef_names=tuple(data["coef_names"]),
            truth=tuple(data["truth"]),
            rbias=tuple(data["rbias"]),
            ase=tuple(data["ase"]),
            ese=None if data["ese"] is None else tuple(data["ese"]),
            cp=tuple(data["cp"]),
            n_replicates=data["n_replicates"],
            n_used=data["n_used"],
            n_failed=data["n_failed"],
            scenario=data["scenario"],
        )

    def table(self) -> str:
        return render_table([self.to_dict()])


def render_table(report_dicts: list[dict]) -> str:
    """Aligned plain-text table of replicate metrics.

    A pure function of the report dictionaries: re-rendering a report
    read back from JSON reproduces the same bytes.
    """
    lines = []
    for rep in report_dicts:
        sc = rep["scenario"]
        lines.append(
            "scenario: n1={n1} n2={n2} design={design} validation={vm} "
            "cor={cor:g} replicates={reps}".format(
                n1=sc["n1"], n2=sc["n2"], design=sc["design"],
                vm=sc["validation_measurements"], cor=sc["target_cor"],
                reps=sc["replicates"],
            )
        )
        lines.append(
            f"estimator={rep['estimator']} used={rep['n_used']} failed={rep['n_failed']}"
        )
        lines.append(
            f"  {'coef':<14} {'truth':>9} {'rbias%':>9} {'ase':>9} {'ese':>9} {'cp':>7}"
        )
        for i, name in enumerate(rep["coef_names"]):
            ese = "-" if rep["ese"] is None else f"{rep['ese'][i]:9.4f}"
            lines.append(
                f"  {name:<14} {rep['truth'][i]:9.4f} {100.0 * rep['rbias'][i]:9.2f} "
                f"{rep['ase'][i]:9.4f} {ese:>9} {rep['cp'][i]:7.3f}"
            )
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# replicate harness

def _fit_one(study: Study, scenario: Scenario, variant: str):
    functional = HistoryFunctional.cumavg()
    link = Link.logit()
    outcome_wc = WorkingCorrelation(scenario.workcorr_outcome)
    if variant == VARIANT_UNCORRECTED:
        fit = fit_uncorrected(study, functional, link, outcome_wc)
    else:
        fit = fit_corrected(
            study,
            functional,
            link,
            variant=variant,
            mem_workcorr=WorkingCorrelation(scenario.workcorr_mem),
            outcome_workcorr=outcome_wc,
            interaction=scenario.mem_spec == MEM_FULL,
        )
    return fit


def _replicate_worker(scenario: Scenario, r: int, variants: tuple[str, ...]) -> dict:
    rep_seed = scenario.base_seed ^ r
    study = gen_study(scenario, rep_seed)
    out = {}
    for variant in variants:
        try:
            fit = _fit_one(study, scenario, variant)
        except MemgeeError as exc:
            out[variant] = {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
            continue
        out[variant] = {
            "ok": True,
            "beta": fit.beta.tolist(),
            "se": fit.se.tolist(),
            "converged": bool(fit.diagnostics.get("converged", True)),
        }
    return out


def run_replicates(
    scenario: Scenario,
    estimators: list[str],
    threads: int = 1,
) -> dict[str, MetricsReport]:
    """Run the scenario's replicates and aggregate metrics per estimator.

    Each replicate seeds its subject streams with ``base_seed XOR r``,
    generates one study, and fits every requested estimator on it.
    Replicates where an estimator raised or failed to converge are
    excluded from that estimator's metrics and counted in ``n_failed``.
    Results are independent of ``threads``.

    Raises
    ------
    AllReplicatesFailed
        If some estimator produced no usable replicate.
    """
    variants = tuple(estimators)
    if not variants:
        raise ValueError("at least one estimator is required")
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown estimator {v!r}; expected one of {VARIANTS}")
    n_rep = scenario.replicates
    results: list[dict | None] = [None] * n_rep
    if threads <= 1:
        for r in range(n_rep):
            results[r] = _replicate_worker(scenario, r, variants)
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_replicate_worker, scenario, r, variants) for r in range(n_rep)]
            for r, fut in enumerate(futures):
                results[r] = fut.result()

    truth = np.asarray(scenario.beta_true, dtype=float)
    reports: dict[str, MetricsReport] = {}
    for variant in variants:
        betas, ses = [], []
        failed = 0
        for r in range(n_rep):
            res = results[r][variant]
            if res["ok"] and res["converged"]:
                betas.append(res["beta"])
                ses.append(res["se"])
            else:
                failed += 1
        if not betas:
            raise AllReplicatesFailed(f"estimator {variant!r}: all {n_rep} replicates failed")
        b = np.asarray(betas)
        s = np.asarray(ses)
        per_coef = [metrics(b[:, i], s[:, i], truth[i]) for i in range(truth.shape[0])]
        reports[variant] = MetricsReport(
            estimator=variant,
            coef_names=COEF_NAMES,
            truth=tuple(truth.tolist()),
            rbias=tuple(mc["rbias"] for mc in per_coef),
            ase=tuple(mc["ase"] for mc in per_coef),
            ese=None if b.shape[0] == 1 else tuple(mc["ese"] for mc in per_coef),
            cp=tuple(mc["cp"] for mc in per_coef),
            n_replicates=n_rep,
            n_used=b.shape[0],
            n_failed=failed,
            scenario=scenario.to_dict(),
        )
    return reports


# ---------------------------------------------------------------------------
# stress construction

def _summary_noise_variance(scenario: Scenario) -> np.ndarray:
    # cumulative-average weights on the unit visit grid are 1/j on the
    # j preceding visits, independent of the uniform start time
    sigma2 = solve_sigma_eps(scenario)
    var_s = np.empty(scenario.n_visits)
    var_s[0] = sigma2[0]
    for j in range(1, scenario.n_visits):
        var_s[j] = float(np.sum(sigma2[:j])) / j**2
    return var_s


def scenario_quadform(scenario: Scenario, beta3: float | None = None) -> float:
    """Expected exposure-uncertainty quadratic form implied by the scenario.

    Mean over visits of Var(s | observed) * (b1 + b3 t)^2, marginalized
    over the uniform start time, with Var(s) propagating the solved
    per-visit noise variances through the cumulative-average weights on
    the unit visit grid.
    """
    var_s = _summary_noise_variance(scenario)
    tm = _visit_time_means(scenario.n_visits)
    b1 = scenario.beta_true[1]
    b3 = scenario.beta_true[3] if beta3 is None else beta3
    quad = var_s * ((b1 + b3 * tm) ** 2 + b3 * b3 / 12.0)
    return float(np.mean(quad))


def stress_scenario(scenario: Scenario, target_quadform: float) -> Scenario:
    """Scale the exposure-time interaction so the expected
    exposure-uncertainty quadratic form hits the target.

    Solves the quadratic in the interaction coefficient closed-form and
    keeps the sign of the scenario's value.
    """
    var_s = _summary_noise_variance(scenario)
    tm = _visit_time_means(scenario.n_visits)
    b1 = scenario.beta_true[1]
    a_coef = float(np.mean(var_s * (tm * tm + 1.0 / 12.0)))
    b_coef = float(np.mean(var_s * tm)) * 2.0 * b1
    c_coef = float(np.mean(var_s)) * b1 * b1
    disc = b_coef * b_coef - 4.0 * a_coef * (c_coef - target_quadform)
    if disc < 0.0:
        raise ValueError(f"target quadratic form {target_quadform} unreachable")
    root = math.sqrt(disc)
    candidates = ((-b_coef - root) / (2.0 * a_coef), (-b_coef + root) / (2.0 * a_coef))
    orig = scenario.beta_true[3]
    sign = -1.0 if orig < 0 else 1.0
    matching = [x for x in candidates if x * sign > 0]
    new_b3 = matching[0] if matching else candidates[0]
    beta = list(scenario.beta_true)
    beta[3] = new_b3
    return scenario.replace(beta_true=tuple(beta))
