"""Command line interface: simulate, fit, diagnose.

Exit codes: 0 success, 1 user or configuration error, 2 numerical
failure. Reports are written as JSON plus an aligned text table; the
table is a pure rendering of the JSON content, so outputs are
byte-identical across reruns and worker counts.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from .correct import (
    VARIANT_UNCORRECTED,
    VARIANTS,
    Z95,
    fit_corrected,
    fit_uncorrected,
)
from .dataset import DESIGN_IVS, load_long_csv, validate_study
from .errors import MemgeeError, NumericalError, UserInputError
from .exposure import HistoryFunctional
from .gee import Link, WorkingCorrelation
from .mem import localized_error_test
from .simlab import Scenario, render_table, run_replicates

APPROX_THRESHOLD = 0.4
LAG_TEST_LEVEL = 0.05


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memgee",
        description="Measurement-error-corrected GEE estimation for longitudinal exposures.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a simulation scenario and report metrics")
    sim.add_argument("--scenario", required=True, help="scenario JSON file")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--replicates", type=int, default=None, help="override replicate count")
    sim.add_argument("--seed", type=int, default=None, help="override base seed")
    sim.add_argument("--threads", type=int, default=1, help="worker processes")
    sim.add_argument(
        "--estimators",
        default=None,
        help="comma-separated estimator variants (default depends on design)",
    )

    fit = sub.add_parser("fit", help="fit corrected and uncorrected models on CSV data")
    fit.add_argument("--data", required=True, help="long-format CSV file")
    fit.add_argument("--design", choices=["ivs", "evs"], default=None)
    fit.add_argument("--variant", choices=list(VARIANTS), default="predicted")
    fit.add_argument("--link", choices=["logit", "log", "identity"], default="logit")
    fit.add_argument("--functional", default="cumavg", help="cumavg or movavg:WINDOW")
    fit.add_argument("--tref", type=float, default=None, help="reference time for the odds ratio")
    fit.add_argument("--out", required=True, help="output directory")
    fit.add_argument("--workcorr-outcome", default="independence",
                     choices=["independence", "exchangeable", "ar1", "unstructured"])
    fit.add_argument("--workcorr-mem", default="independence",
                     choices=["independence", "exchangeable", "ar1", "unstructured"])
    fit.add_argument("--no-interaction", action="store_true",
                     help="drop the surrogate-by-time column from the calibration model")

    diag = sub.add_parser("diagnose", help="run assumption and approximation diagnostics")
    diag.add_argument("--data", required=True, help="long-format CSV file")
    diag.add_argument("--design", choices=["ivs", "evs"], default=None)
    diag.add_argument("--link", choices=["logit", "log", "identity"], default="logit")
    diag.add_argument("--functional", default="cumavg", help="cumavg or movavg:WINDOW")
    diag.add_argument("--out", required=True, help="output directory")
    return parser


def _parse_functional(text: str) -> HistoryFunctional:
    try:
        return HistoryFunctional.parse(text)
    except ValueError as exc:
        raise UserInputError(str(exc)) from None


def _load_csv(path: str, design: str | None):
    if not Path(path).exists():
        raise UserInputError(f"data file not found: {path}")
    return load_long_csv(path, design=design)


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(text)


def _out_dir(path_text: str) -> Path:
    out = Path(path_text)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# simulate

def cmd_simulate(args) -> int:
    scenario_path = Path(args.scenario)
    if not scenario_path.exists():
        raise UserInputError(f"scenario file not found: {scenario_path}")
    try:
        scenario = Scenario.from_json(scenario_path)
    except (json.JSONDecodeError, ValueError, TypeError) as exc:
        raise UserInputError(f"invalid scenario {scenario_path}: {exc}") from None
    overrides = {}
    if args.replicates is not None:
        overrides["replicates"] = args.replicates
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    if overrides:
        scenario = scenario.replace(**overrides)
    if args.estimators:
        estimators = [v.strip() for v in args.estimators.split(",") if v.strip()]
    elif scenario.design == DESIGN_IVS:
        estimators = ["predicted", "true-ivs", "ivw", "uncorrected"]
    else:
        estimators = ["predicted", "uncorrected"]
    for v in estimators:
        if v not in VARIANTS:
            raise UserInputError(f"unknown estimator {v!r}; expected one of {VARIANTS}")
    reports = run_replicates(scenario, estimators, threads=max(1, args.threads))
    dicts = [reports[v].to_dict() for v in estimators]
    out = _out_dir(args.out)
    _write_json(out / "metrics.json", {"reports": dicts})
    _write_text(out / "metrics.txt", render_table(dicts))
    sys.stdout.write(render_table(dicts))
    return 0


# ---------------------------------------------------------------------------
# fit

def _coef_names(n_covariates: int) -> list[str]:
    return ["intercept", "exposure", "time", "exposure:time"] + [
        f"W{j + 1}" for j in range(n_covariates)
    ]


def _coef_entries(names, beta, se, cis) -> list[dict]:
    return [
        {
            "name": names[i],
            "estimate": float(beta[i]),
            "se": float(se[i]),
            "ci_lo": float(cis[i, 0]),
            "ci_hi": float(cis[i, 1]),
        }
        for i in range(len(names))
    ]


def _odds_ratio_entry(beta, cov, tref: float) -> dict:
    linear = float(beta[1] + beta[3] * tref)
    var = float(cov[1, 1] + 2.0 * tref * cov[1, 3] + tref * tref * cov[3, 3])
    se = math.sqrt(max(var, 0.0))
    return {
        "t_ref": tref,
        "log_or": linear,
        "se_log_or": se,
        "odds_ratio": math.exp(linear),
        "ci_lo": math.exp(linear - Z95 * se),
        "ci_hi": math.exp(linear + Z95 * se),
    }


def render_fit_table(report: dict) -> str:
    lines = []
    for section in report["sections"]:
        lines.append(
            f"{section['label']}  link={report['link']} functional={report['functional']}"
        )
        lines.append(f"  {'coef':<14} {'estimate':>10} {'se':>10} {'ci95_lo':>10} {'ci95_hi':>10}")
        for row in section["coefficients"]:
            lines.append(
                f"  {row['name']:<14} {row['estimate']:10.4f} {row['se']:10.4f} "
                f"{row['ci_lo']:10.4f} {row['ci_hi']:10.4f}"
            )
        lines.append("")
    orx = report.get("odds_ratio")
    if orx is not None:
        lines.append(
            "odds ratio at t={t:g}: {o:.4f}  ci95 [{lo:.4f}, {hi:.4f}]".format(
                t=orx["t_ref"], o=orx["odds_ratio"], lo=orx["ci_lo"], hi=orx["ci_hi"]
            )
        )
        lines.append("")
    return "\n".join(lines)


def cmd_fit(args) -> int:
    study = _load_csv(args.data, args.design)
    report = validate_study(study)
    if not report.ok:
        raise UserInputError("study failed validation:\n" + report.describe())
    functional = _parse_functional(args.functional)
    link = Link.by_name(args.link)
    outcome_wc = WorkingCorrelation(args.workcorr_outcome)
    mem_wc = WorkingCorrelation(args.workcorr_mem)
    names = _coef_names(study.n_covariates)

    sections = []
    if args.variant == VARIANT_UNCORRECTED:
        main_fit = fit_uncorrected(study, functional, link, outcome_wc)
        sections.append(
            {
                "label": "uncorrected",
                "variant": VARIANT_UNCORRECTED,
                "coefficients": _coef_entries(names, main_fit.beta, main_fit.se, main_fit.wald_cis),
                "converged": bool(main_fit.diagnostics.get("converged", True)),
            }
        )
    else:
        main_fit = fit_corrected(
            study,
            functional,
            link,
            variant=args.variant,
            mem_workcorr=mem_wc,
            outcome_workcorr=outcome_wc,
            interaction=not args.no_interaction,
        )
        sections.append(
            {
                "label": f"corrected ({args.variant})",
                "variant": args.variant,
                "coefficients": _coef_entries(names, main_fit.beta, main_fit.se, main_fit.wald_cis),
                "converged": bool(main_fit.diagnostics.get("converged", True)),
            }
        )
        plain = fit_uncorrected(study, functional, link, outcome_wc)
        sections.append(
            {
                "label": "uncorrected",
                "variant": VARIANT_UNCORRECTED,
                "coefficients": _coef_entries(names, plain.beta, plain.se, plain.wald_cis),
                "converged": bool(plain.diagnostics.get("converged", True)),
            }
        )

    payload = {
        "link": args.link,
        "functional": functional.label,
        "design": study.design,
        "sections": sections,
        "odds_ratio": None if args.tref is None else _odds_ratio_entry(
            main_fit.beta, main_fit.covariance, args.tref
        ),
    }
    stat = main_fit.diagnostics.get("approximation_statistic") if main_fit.diagnostics else None
    if stat is not None:
        payload["approximation_statistic"] = float(stat)
    out = _out_dir(args.out)
    _write_json(out / "fit.json", payload)
    _write_text(out / "fit.txt", render_fit_table(payload))
    sys.stdout.write(render_fit_table(payload))
    return 0


# ---------------------------------------------------------------------------
# diagnose

def render_diagnostics_table(report: dict) -> str:
    lag = report["localized_error_test"]
    lines = [
        "localized error assumption",
        f"  F = {lag['f_stat']:.4f} on ({lag['df'][0]}, {lag['df'][1]}) df, "
        f"p = {lag['p_value']:.4f}",
        f"  verdict: {lag['verdict']}",
        "",
        "first-order approximation",
        f"  statistic = {report['approximation_statistic']:.4f} "
        f"(threshold {report['threshold']:g})",
        f"  verdict: {report['approximation_verdict']}",
        "",
    ]
    return "\n".join(lines)


def cmd_diagnose(args) -> int:
    study = _load_csv(args.data, args.design)
    report = validate_study(study)
    if not report.ok:
        raise UserInputError("study failed validation:\n" + report.describe())
    functional = _parse_functional(args.functional)
    link = Link.by_name(args.link)
    lag = localized_error_test(study)
    fit = fit_corrected(study, functional, link, variant="predicted")
    stat = float(fit.diagnostics["approximation_statistic"])
    payload = {
        "localized_error_test": {
            "f_stat": float(lag.f_stat),
            "df": [int(lag.df[0]), int(lag.df[1])],
            "p_value": float(lag.p_value),
            "verdict": "assumption consistent" if lag.p_value >= LAG_TEST_LEVEL
            else "assumption questionable",
        },
        "approximation_statistic": stat,
        "threshold": APPROX_THRESHOLD,
        "approximation_verdict": "approximation reliable" if stat < APPROX_THRESHOLD
        else "approximation suspect",
    }
    out = _out_dir(args.out)
    _write_json(out / "diagnostics.json", payload)
    _write_text(out / "diagnostics.txt", render_diagnostics_table(payload))
    sys.stdout.write(render_diagnostics_table(payload))
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "fit":
            return cmd_fit(args)
        return cmd_diagnose(args)
    except UserInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    except MemgeeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
