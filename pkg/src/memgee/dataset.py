"""Study containers and long-format CSV I/O.

A study holds one panel per subject. Main-study panels carry outcomes and
the surrogate exposure; validation panels additionally carry the true
exposure at the points where it was measured. The same covariate block W
feeds both the measurement error model and the outcome model; if an
analysis wants different covariate sets, subsetting columns is a data
preparation step, not something this layer guesses at.

CSV long format (one row per subject-visit)::

    role,id,time,y,C,c,W1,...,Wp

``role`` is ``main`` or ``validation``; ``y`` (outcome) and ``c`` (true
exposure) may be empty; empty cells mean missing. Decimal separator is
``.`` and the file must be UTF-8 with a header row.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DesignMismatch,
    DimensionMismatch,
    DuplicateTime,
    LengthMismatch,
    ParseError,
    SchemaError,
)

logger = logging.getLogger(__name__)

DESIGN_IVS = "ivs"
DESIGN_EVS = "evs"

ROLE_MAIN = "main"
ROLE_VALIDATION = "validation"

_BASE_COLUMNS = ("role", "id", "time", "y", "C", "c")
_W_PATTERN = re.compile(r"^W(\d+)$")


@dataclass(frozen=True)
class SubjectPanel:
    """All records of one subject, sorted by time.

    Attributes
    ----------
    subject_id : str
    times : ndarray, shape (m,)
    surrogate : ndarray, shape (m,)
        Surrogate exposure C at each visit.
    covariates : ndarray, shape (m, p)
        Covariate block W; ``p`` may be zero.
    outcome : ndarray, shape (m,), or None
        Outcome y; None for panels without outcomes (EVS validation).
    true_exposure : ndarray, shape (m,)
        True exposure c; NaN wherever :attr:`exposure_mask` is False.
    exposure_mask : ndarray of bool, shape (m,)
        True where the true exposure was measured.
    """

    subject_id: str
    times: np.ndarray
    surrogate: np.ndarray
    covariates: np.ndarray
    outcome: np.ndarray | None = None
    true_exposure: np.ndarray = None  # type: ignore[assignment]
    exposure_mask: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        m = times.shape[0]
        object.__setattr__(self, "times", times)
        surr = np.asarray(self.surrogate, dtype=float)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(m, -1) if m else cov.reshape(0, 0)
        if surr.shape[0] != m or cov.shape[0] != m:
            raise LengthMismatch(
                f"subject {self.subject_id}: times/surrogate/covariates lengths differ"
            )
        object.__setattr__(self, "surrogate", surr)
        object.__setattr__(self, "covariates", cov)
        if self.outcome is not None:
            y = np.asarray(self.outcome, dtype=float)
            if y.shape[0] != m:
                raise LengthMismatch(f"subject {self.subject_id}: outcome length differs")
            object.__setattr__(self, "outcome", y)
        if self.exposure_mask is None:
            if self.true_exposure is None:
                mask = np.zeros(m, dtype=bool)
            else:
                mask = np.isfinite(np.asarray(self.true_exposure, dtype=float))
        else:
            mask = np.asarray(self.exposure_mask, dtype=bool)
        if mask.shape[0] != m:
            raise LengthMismatch(f"subject {self.subject_id}: exposure mask length differs")
        if self.true_exposure is None:
            c = np.full(m, np.nan)
        else:
            c = np.asarray(self.true_exposure, dtype=float).copy()
        if c.shape[0] != m:
            raise LengthMismatch(f"subject {self.subject_id}: true exposure length differs")
        c[~mask] = np.nan
        object.__setattr__(self, "true_exposure", c)
        object.__setattr__(self, "exposure_mask", mask)

    @property
    def n_points(self) -> int:
        return self.times.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def has_outcome(self) -> bool:
        return self.outcome is not None


@dataclass(frozen=True)
class Study:
    """A main study plus its validation study.

    ``design`` is ``"ivs"`` (validation subjects drawn from the cohort,
    carrying outcomes) or ``"evs"`` (external validation, no outcomes).
    """

    design: str
    main: tuple[SubjectPanel, ...]
    validation: tuple[SubjectPanel, ...]

    def __post_init__(self) -> None:
        if self.design not in (DESIGN_IVS, DESIGN_EVS):
            raise DesignMismatch(f"unknown design {self.design!r}; use 'ivs' or 'evs'")
        object.__setattr__(self, "main", tuple(self.main))
        object.__setattr__(self, "validation", tuple(self.validation))
        widths = {p.n_covariates for p in self.main + self.validation if p.n_points > 0}
        if len(widths) > 1:
            raise DimensionMismatch(f"inconsistent covariate widths across panels: {widths}")

    @property
    def n_covariates(self) -> int:
        for p in self.main + self.validation:
            if p.n_points > 0:
                return p.n_covariates
        return 0


@dataclass(frozen=True)
class Violation:
    subject_id: str
    kind: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def describe(self) -> str:
        if self.ok:
            return "no violations"
        return "\n".join(f"[{v.kind}] subject {v.subject_id}: {v.message}" for v in self.violations)


def validate_study(study: Study) -> ValidationReport:
    """Structural checks shared by every estimation entry point.

    Returns a report listing violations; an empty report means the study
    is usable. Checks: strictly increasing times, true exposure never
    present where the surrogate is missing, no outcomes in EVS validation
    panels, outcomes present where fits need them, at least one usable
    point per subject, and at least one true-exposure point per
    validation panel.
    """
    report = ValidationReport()

    def flag(panel: SubjectPanel, kind: str, message: str) -> None:
        report.violations.append(Violation(panel.subject_id, kind, message))

    for panel in study.main + study.validation:
        if panel.n_points == 0:
            flag(panel, "no_usable_points", "panel has no usable records")
            continue
        if panel.n_points > 1 and not np.all(np.diff(panel.times) > 0):
            flag(panel, "non_monotone_times", "times are not strictly increasing")
        bad = panel.exposure_mask & ~np.isfinite(panel.surrogate)
        if np.any(bad):
            flag(
                panel,
                "true_exposure_without_surrogate",
                f"true exposure present but surrogate missing at {int(bad.sum())} point(s)",
            )

    for panel in study.main:
        if panel.outcome is None or not np.any(np.isfinite(panel.outcome)):
            flag(panel, "missing_outcome_in_main", "main-study panel has no outcomes")

    for panel in study.validation:
        if panel.n_points and not np.any(panel.exposure_mask):
            flag(panel, "no_true_exposure_in_validation", "validation panel has no true exposure")
        has_outcome = panel.outcome is not None and np.any(np.isfinite(panel.outcome))
        if study.design == DESIGN_EVS and has_outcome:
            flag(panel, "outcome_in_evs_validation", "outcome in EVS validation panel")
        if study.design == DESIGN_IVS and not has_outcome:
            flag(panel, "missing_outcome_in_ivs_validation", "internal validation panel lacks outcomes")

    return report


def _parse_cell(raw: str, line_no: int, column: str) -> float:
    text = raw.strip() if raw is not None else ""
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"line {line_no}, column {column!r}: cannot parse {raw!r}") from None


def _resolve_schema(header: list[str], schema: dict | None):
    schema = dict(schema or {})
    w_override = schema.pop("W", None)
    colmap = {name: schema.get(name, name) for name in _BASE_COLUMNS}
    present = set(header)
    for required in ("role", "id", "time", "C"):
        if colmap[required] not in present:
            raise SchemaError(f"missing required column {colmap[required]!r} in header {header}")
    if w_override is not None:
        w_cols = list(w_override)
        for name in w_cols:
            if name not in present:
                raise SchemaError(f"declared covariate column {name!r} not in header")
    else:
        numbered = []
        for name in header:
            match = _W_PATTERN.match(name)
            if match:
                numbered.append((int(match.group(1)), name))
        numbered.sort()
        w_cols = [name for _, name in numbered]
    known = {colmap[c] for c in _BASE_COLUMNS} | set(w_cols)
    unknown = [name for name in header if name not in known]
    if unknown:
        raise SchemaError(f"unrecognized columns {unknown}; declare them via the schema map")
    return colmap, w_cols


def load_long_csv(path, schema: dict | None = None, design: str | None = None) -> Study:
    """Read a long-format CSV into a :class:`Study`.

    Parameters
    ----------
    path : str or pathlib.Path
    schema : dict, optional
        Renames columns: keys from ``role,id,time,y,C,c`` map to actual
        header names, and key ``"W"`` may carry an explicit list of
        covariate column names (default: all columns named ``W1..Wp``).
    design : str, optional
        ``"ivs"`` or ``"evs"``. When omitted, inferred: any validation
        row carrying an outcome makes the study IVS, otherwise EVS.

    Returns
    -------
    Study
        Rows grouped by subject and sorted by time. Points missing the
        surrogate, any covariate, or (for main subjects) the outcome are
        dropped with a logged warning.

    Raises
    ------
    SchemaError, ParseError, DuplicateTime
    """
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file, expected a header row")
        header = [name.strip() for name in reader.fieldnames]
        reader.fieldnames = header
        colmap, w_cols = _resolve_schema(header, schema)

        subjects: dict[str, dict] = {}
        roles: dict[str, str] = {}
        for row in reader:
            line_no = reader.line_num
            role = (row.get(colmap["role"]) or "").strip()
            if role not in (ROLE_MAIN, ROLE_VALIDATION):
                raise ParseError(
                    f"line {line_no}, column {colmap['role']!r}: role must be "
                    f"'main' or 'validation', got {role!r}"
                )
            sid = (row.get(colmap["id"]) or "").strip()
            if not sid:
                raise ParseError(f"line {line_no}, column {colmap['id']!r}: empty id")
            if sid in roles and roles[sid] != role:
                raise ParseError(
                    f"line {line_no}: subject {sid!r} appears with both roles"
                )
            roles[sid] = role
            t = _parse_cell(row.get(colmap["time"], ""), line_no, colmap["time"])
            if math.isnan(t):
                raise ParseError(f"line {line_no}, column {colmap['time']!r}: time is required")
            y = _parse_cell(row.get(colmap["y"], ""), line_no, colmap["y"])
            surr = _parse_cell(row.get(colmap["C"], ""), line_no, colmap["C"])
            true_c = _parse_cell(row.get(colmap["c"], ""), line_no, colmap["c"])
            w = [_parse_cell(row.get(name, ""), line_no, name) for name in w_cols]

            dropped = None
            if math.isnan(surr):
                dropped = "missing surrogate"
            elif any(math.isnan(v) for v in w):
                dropped = "missing covariate"
            elif role == ROLE_MAIN and math.isnan(y):
                dropped = "missing outcome"
            entry = subjects.setdefault(sid, {"role": role, "rows": []})
            if dropped is not None:
                logger.warning("dropping line %d (subject %s): %s", line_no, sid, dropped)
                continue
            entry["rows"].append((t, y, surr, true_c, w, line_no))

    main_panels, validation_panels = [], []
    any_validation_outcome = False
    for sid, entry in subjects.items():
        rows = sorted(entry["rows"], key=lambda r: r[0])
        times = [r[0] for r in rows]
        for a, b in zip(times, times[1:]):
            if a == b:
                raise DuplicateTime(f"subject {sid!r} has two records at time {a}")
        ys = np.array([r[1] for r in rows])
        panel = SubjectPanel(
            subject_id=sid,
            times=np.array(times),
            surrogate=np.array([r[2] for r in rows]),
            covariates=np.array([r[4] for r in rows]).reshape(len(rows), len(w_cols)),
            outcome=None if (len(rows) == 0 or np.all(np.isnan(ys))) else ys,
            true_exposure=np.array([r[3] for r in rows]),
        )
        if entry["role"] == ROLE_MAIN:
            main_panels.append(panel)
        else:
            validation_panels.append(panel)
            if panel.outcome is not None:
                any_validation_outcome = True

    if design is None:
        design = DESIGN_IVS if any_validation_outcome else DESIGN_EVS
    return Study(design=design, main=tuple(main_panels), validation=tuple(validation_panels))


def _format_cell(value: float | None) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return repr(float(value))


def write_long_csv(study: Study, path) -> None:
    """Emit a study back to the long CSV format (inverse of loading).

    Round-trips losslessly up to row order and float formatting.
    """
    p = study.n_covariates
    header = ["role", "id", "time", "y", "C", "c"] + [f"W{k + 1}" for k in range(p)]
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for role, panels in ((ROLE_MAIN, study.main), (ROLE_VALIDATION, study.validation)):
            for panel in panels:
                for j in range(panel.n_points):
                    y = panel.outcome[j] if panel.outcome is not None else None
                    c = panel.true_exposure[j] if panel.exposure_mask[j] else None
                    writer.writerow(
                        [role, panel.subject_id, _format_cell(panel.times[j]),
                         _format_cell(y), _format_cell(panel.surrogate[j]), _format_cell(c)]
                        + [_format_cell(panel.covariates[j, k]) for k in range(p)]
                    )
