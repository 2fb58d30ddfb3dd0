"""Panel data model, CSV ingest, percentile conversion and sample selection.

A :class:`Panel` bundles three frames:

``students``
    one row per student: ``student_id, cohort, female, immigrant, ses,
    ses_percentile, in_sample`` plus any student-level outcomes.
``cells``
    one row per (student, subject, grade_level): ``class_id, school_id,
    test_score_raw, test_score_pctl, class_grade, observed`` plus rank
    columns once computed.
``rosters``
    one row per class: ``school_id, grade_level, actual_size, n_observed,
    coverage, cpi_italian, cpi_math``.

Panels are treated as immutable; every operation returns a new one.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DuplicateCell, EmptySelection, EmptySlice, MissingColumn, TypeViolation

SUBJECTS = ("italian", "math")
MANDATORY = (
    "student_id",
    "subject",
    "grade_level",
    "class_id",
    "school_id",
    "test_score",
    "class_grade",
    "female",
    "immigrant",
    "ses",
    "coverage",
    "cheating_propensity",
)
OPTIONAL = ("cohort", "ses_percentile", "class_size", "observed", "test_score_pctl", "in_sample")
STUDENT_COLS = ("student_id", "cohort", "female", "immigrant", "ses", "ses_percentile", "in_sample")
CELL_COLS = (
    "student_id",
    "subject",
    "grade_level",
    "class_id",
    "school_id",
    "test_score_raw",
    "test_score_pctl",
    "class_grade",
    "observed",
)
ROSTER_COLS = ("class_id", "school_id", "grade_level", "actual_size", "n_observed", "coverage", "cpi_italian", "cpi_math")

_SUBJECT_ALIASES = {"italian": "italian", "ita": "italian", "math": "math", "mat": "math", "maths": "math"}
_BOOL_TRUE = {"1", "true", "t", "yes", "y"}
_BOOL_FALSE = {"0", "false", "f", "no", "n"}


@dataclass(frozen=True)
class Panel:
    students: pd.DataFrame
    cells: pd.DataFrame
    rosters: pd.DataFrame
    provenance: str = "ingested"
    selection_log: tuple = ()
    meta: dict = field(default_factory=dict)

    def replace(self, **changes) -> "Panel":
        return dataclasses.replace(self, **changes)

    def slice(self, grade_level: int, subject: str | None = None) -> pd.DataFrame:
        c = self.cells
        mask = c["grade_level"] == grade_level
        if subject is not None:
            mask &= c["subject"] == subject
        return c.loc[mask]

    def observed_ids(self, class_id) -> list:
        c = self.cells
        ids = c.loc[(c["class_id"] == class_id) & c["observed"], "student_id"]
        return sorted(ids.unique().tolist())

    def same_data(self, other: "Panel") -> bool:
        return all(
            getattr(self, name).reset_index(drop=True).equals(getattr(other, name).reset_index(drop=True))
            for name in ("students", "cells", "rosters")
        )

    def validate(self) -> None:
        cells, rosters = self.cells, self.rosters
        dup = cells.duplicated(["student_id", "subject", "grade_level"])
        if dup.any():
            r = cells.loc[dup].iloc[0]
            raise DuplicateCell((r["student_id"], r["subject"], int(r["grade_level"])))
        keys = cells[["class_id", "grade_level"]].drop_duplicates()
        known = keys.merge(rosters[["class_id", "grade_level"]], how="left", indicator=True)
        if (known["_merge"] != "both").any():
            raise TypeViolation("cells reference classes absent from rosters")
        if (rosters["actual_size"] < rosters["n_observed"]).any():
            raise TypeViolation("roster with more observed students than its actual size")
        pct = cells["test_score_pctl"].dropna()
        if ((pct < 1) | (pct > 100)).any():
            raise TypeViolation("test_score_pctl outside [1, 100]")
        cg = cells["class_grade"].dropna()
        if ((cg < 1) | (cg > 10)).any():
            raise TypeViolation("class_grade outside [1, 10]")
        sp = self.students["ses_percentile"].dropna()
        if ((sp < 1) | (sp > 100)).any():
            raise TypeViolation("ses_percentile outside [1, 100]")


@dataclass(frozen=True)
class SelectionConfig:
    pivot_grade: int = 5
    coverage_threshold: float = 0.90
    cheating_threshold: float = 0.50
    require_class_grades: bool = True
    required_grades: tuple = ()


def ecdf_percentile(values) -> np.ndarray:
    """``ceil(100 * r / N)`` where ``r`` is the average tied position (1 = lowest).

    Computed with integers on doubled positions so bin edges are exact.
    """
    v = pd.Series(np.asarray(values, dtype=float))
    n = len(v)
    if n == 0:
        return np.array([], dtype=float)
    r2 = np.rint(2 * v.rank(method="average").to_numpy()).astype(np.int64)
    pct = -((-100 * r2) // (2 * n))
    return pct.astype(float)


def percentile_convert(panel: Panel, grade_level: int, subject: str) -> Panel:
    """Fill ``test_score_pctl`` for one (grade, subject) slice from raw scores."""
    cells = panel.cells
    mask = (
        (cells["grade_level"] == grade_level)
        & (cells["subject"] == subject)
        & cells["observed"]
        & cells["test_score_raw"].notna()
    )
    if not mask.any():
        raise EmptySlice(f"no raw scores for grade {grade_level}, subject {subject}")
    cells = cells.copy()
    cells.loc[mask, "test_score_pctl"] = ecdf_percentile(cells.loc[mask, "test_score_raw"])
    return panel.replace(cells=cells)


def convert_all(panel: Panel, grades=None) -> Panel:
    """Percentile-convert every (grade, subject) slice that carries raw scores."""
    cells = panel.cells
    has_raw = cells["observed"] & cells["test_score_raw"].notna()
    slices = cells.loc[has_raw, ["grade_level", "subject"]].drop_duplicates()
    for g, s in sorted(slices.itertuples(index=False, name=None)):
        if grades is None or g in grades:
            panel = percentile_convert(panel, int(g), s)
    return panel


def _parse_bool(series: pd.Series, name: str, bad: list):
    out = []
    for i, v in series.items():
        if isinstance(v, (bool, np.bool_)):
            out.append(bool(v))
            continue
        s = str(v).strip().lower()
        if s in _BOOL_TRUE:
            out.append(True)
        elif s in _BOOL_FALSE:
            out.append(False)
        else:
            bad.append((i, name, v))
            out.append(False)
    return pd.Series(out, index=series.index, dtype=bool)


def _parse_float(series: pd.Series, name: str, bad: list, allow_missing=True, lo=None, hi=None):
    num = pd.to_numeric(series, errors="coerce")
    blank = series.isna() | (series.astype(str).str.strip() == "")
    for i in series.index[num.isna() & ~blank]:
        bad.append((i, name, series[i]))
    if not allow_missing:
        for i in series.index[blank]:
            bad.append((i, name, series[i]))
    ok = num.notna()
    if lo is not None:
        for i in series.index[ok & (num < lo)]:
            bad.append((i, name, series[i]))
    if hi is not None:
        for i in series.index[ok & (num > hi)]:
            bad.append((i, name, series[i]))
    return num.astype(float)


def load_panel(path, schema: dict | None = None) -> Panel:
    """Read a delimited file with one row per (student, subject, grade_level).

    ``schema`` maps canonical column names to the names used in the file.
    Row numbers in diagnostics count data rows from 1.
    """
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    if schema:
        raw = raw.rename(columns={v: k for k, v in schema.items()})
    missing = [c for c in MANDATORY if c not in raw.columns]
    if missing:
        raise MissingColumn(f"missing mandatory column(s): {', '.join(missing)}")
    raw.index = pd.RangeIndex(1, len(raw) + 1)
    raw = raw.replace({"": np.nan})
    bad: list = []

    subj = raw["subject"].astype(str).str.strip().str.lower().map(_SUBJECT_ALIASES)
    for i in raw.index[subj.isna()]:
        bad.append((i, "subject", raw.at[i, "subject"]))
    grade = pd.to_numeric(raw["grade_level"], errors="coerce")
    for i in raw.index[grade.isna() | (grade != grade.round())]:
        bad.append((i, "grade_level", raw.at[i, "grade_level"]))
    for col in ("student_id", "class_id", "school_id"):
        for i in raw.index[raw[col].isna()]:
            bad.append((i, col, ""))
    test = _parse_float(raw["test_score"], "test_score", bad)
    cgrade = _parse_float(raw["class_grade"], "class_grade", bad, lo=1, hi=10)
    female = _parse_bool(raw["female"], "female", bad)
    immigrant = _parse_bool(raw["immigrant"], "immigrant", bad)
    ses = _parse_float(raw["ses"], "ses", bad)
    coverage = _parse_float(raw["coverage"], "coverage", bad, allow_missing=False, lo=0, hi=1)
    cpi = _parse_float(raw["cheating_propensity"], "cheating_propensity", bad, lo=0, hi=1)
    observed = (
        _parse_bool(raw["observed"], "observed", bad)
        if "observed" in raw
        else pd.Series(True, index=raw.index)
    )
    in_sample = (
        _parse_bool(raw["in_sample"], "in_sample", bad) if "in_sample" in raw else pd.Series(True, index=raw.index)
    )
    cohort = _parse_float(raw["cohort"], "cohort", bad) if "cohort" in raw else pd.Series(np.nan, index=raw.index)
    pctl = (
        _parse_float(raw["test_score_pctl"], "test_score_pctl", bad, lo=1, hi=100)
        if "test_score_pctl" in raw
        else pd.Series(np.nan, index=raw.index)
    )
    ses_p = (
        _parse_float(raw["ses_percentile"], "ses_percentile", bad, lo=1, hi=100)
        if "ses_percentile" in raw
        else None
    )
    size = _parse_float(raw["class_size"], "class_size", bad, lo=1) if "class_size" in raw else None
    if bad:
        rows = sorted({b[0] for b in bad})
        detail = "; ".join(f"row {i}: {c}={v!r}" for i, c, v in bad[:10])
        raise TypeViolation(f"{len(bad)} invalid value(s): {detail}", rows=rows)

    df = pd.DataFrame(
        {
            "student_id": raw["student_id"].astype(str),
            "subject": subj,
            "grade_level": grade.astype(np.int64),
            "class_id": raw["class_id"].astype(str),
            "school_id": raw["school_id"].astype(str),
            "test_score_raw": test,
            "test_score_pctl": pctl,
            "class_grade": cgrade,
            "observed": observed,
        }
    )
    dup = df.duplicated(["student_id", "subject", "grade_level"], keep="first")
    if dup.any():
        i = df.index[dup][0]
        raise DuplicateCell(
            f"row {i}: duplicate cell {(df.at[i, 'student_id'], df.at[i, 'subject'], int(df.at[i, 'grade_level']))}"
        )

    extras = [c for c in raw.columns if c not in MANDATORY and c not in OPTIONAL]
    for c in extras:
        num = pd.to_numeric(raw[c], errors="coerce")
        df[c] = num if num.notna().sum() == raw[c].notna().sum() else raw[c]

    stud = pd.DataFrame(
        {
            "student_id": df["student_id"],
            "cohort": cohort,
            "female": female,
            "immigrant": immigrant,
            "ses": ses,
            "ses_percentile": ses_p if ses_p is not None else np.nan,
            "in_sample": in_sample,
        }
    )
    students = stud.drop_duplicates("student_id").reset_index(drop=True)
    if stud.drop_duplicates().shape[0] != students.shape[0]:
        raise TypeViolation("student attributes differ across rows of the same student")
    if ses_p is None:
        students["ses_percentile"] = np.nan
        have = students["ses"].notna()
        students.loc[have, "ses_percentile"] = ecdf_percentile(students.loc[have, "ses"])

    classes = pd.DataFrame(
        {
            "class_id": df["class_id"],
            "school_id": df["school_id"],
            "grade_level": df["grade_level"],
            "coverage": coverage,
            "class_size": size if size is not None else np.nan,
        }
    )
    per_class = classes.drop_duplicates()
    if per_class["class_id"].duplicated().any():
        cid = per_class.loc[per_class["class_id"].duplicated(), "class_id"].iloc[0]
        raise TypeViolation(f"class {cid!r} has inconsistent school, grade, coverage or size")
    n_obs = df.loc[df["observed"]].groupby("class_id")["student_id"].nunique()
    rosters = per_class.set_index("class_id")
    rosters["n_observed"] = n_obs.reindex(rosters.index).fillna(0).astype(np.int64)
    if size is not None:
        rosters["actual_size"] = rosters["class_size"].astype(np.int64)
    else:
        cov = rosters["coverage"].where(rosters["coverage"] > 0)
        rosters["actual_size"] = np.rint(rosters["n_observed"] / cov).fillna(rosters["n_observed"]).astype(np.int64)
    rosters["actual_size"] = np.maximum(rosters["actual_size"], rosters["n_observed"])
    rosters["coverage"] = rosters["n_observed"] / rosters["actual_size"].where(rosters["actual_size"] > 0, 1)
    cpi_frame = pd.DataFrame({"class_id": df["class_id"], "subject": df["subject"], "cpi": cpi})
    cpi_wide = cpi_frame.groupby(["class_id", "subject"])["cpi"].max().unstack()
    for s in SUBJECTS:
        rosters[f"cpi_{s}"] = cpi_wide[s].reindex(rosters.index) if s in cpi_wide else np.nan
        rosters[f"cpi_{s}"] = rosters[f"cpi_{s}"].fillna(0.0)
    rosters = rosters.reset_index()[list(ROSTER_COLS)]

    panel = Panel(students, df.reset_index(drop=True), rosters, provenance="ingested")
    panel.validate()
    return panel


def panel_rows(panel: Panel) -> pd.DataFrame:
    """Flatten a panel back to the one-row-per-cell file layout."""
    cells = panel.cells
    ros = panel.rosters
    out = cells.merge(panel.students, on="student_id", how="left", validate="many_to_one")
    out = out.merge(
        ros[["class_id", "actual_size", "coverage", "cpi_italian", "cpi_math"]], on="class_id", how="left"
    )
    out["cheating_propensity"] = np.where(out["subject"] == "italian", out["cpi_italian"], out["cpi_math"])
    out = out.rename(columns={"test_score_raw": "test_score", "actual_size": "class_size"})
    head = list(MANDATORY) + ["cohort", "ses_percentile", "class_size", "observed", "test_score_pctl", "in_sample"]
    extras = [c for c in cells.columns if c not in CELL_COLS]
    extras += [c for c in panel.students.columns if c not in STUDENT_COLS]
    # sorted so the layout does not depend on the order columns were added
    cols = head + sorted(set(extras) - set(head))
    out = out[cols].copy()
    for b in ("female", "immigrant", "observed", "in_sample"):
        out[b] = out[b].astype(int)
    return out


def write_panel(panel: Panel, path, log_path=None) -> None:
    """Write the panel as CSV and, optionally, the selection log as JSON lines."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    panel_rows(panel).to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
    if log_path is not None:
        write_selection_log(panel, log_path)


def write_selection_log(panel: Panel, path) -> None:
    with open(path, "w") as fh:
        for entry in panel.selection_log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _drop_classes(panel: Panel, pivot: int, bad_classes: set, rule: str) -> Panel:
    cells = panel.cells
    pivot_cells = cells.loc[cells["grade_level"] == pivot]
    gone = set(pivot_cells.loc[pivot_cells["class_id"].isin(bad_classes), "student_id"])
    keep_cells = cells.loc[~cells["student_id"].isin(gone)]
    keep_students = panel.students.loc[~panel.students["student_id"].isin(gone)]
    live = set(keep_cells["class_id"])
    keep_rosters = panel.rosters.loc[panel.rosters["class_id"].isin(live)]
    entry = {"rule": rule, "classes_dropped": len(bad_classes), "students_dropped": len(gone)}
    return panel.replace(
        students=keep_students.reset_index(drop=True),
        cells=keep_cells.reset_index(drop=True),
        rosters=keep_rosters.reset_index(drop=True),
        selection_log=panel.selection_log + (entry,),
    )


def apply_selection(panel: Panel, rules: SelectionConfig = SelectionConfig()) -> Panel:
    """Apply the sample restrictions in a fixed order and log every step.

    Percentiles must already be present; they are never recomputed here.
    """
    pivot = rules.pivot_grade
    cells = panel.cells
    need = cells["observed"] & cells["test_score_raw"].notna() & (cells["grade_level"] == pivot)
    if cells.loc[need, "test_score_pctl"].isna().any():
        raise ValueError("percentiles must be computed on the unrestricted panel before selection")

    ros = panel.rosters
    pivot_ros = ros.loc[ros["grade_level"] == pivot]
    low_cov = set(pivot_ros.loc[~(pivot_ros["coverage"] > rules.coverage_threshold), "class_id"])
    panel = _drop_classes(panel, pivot, low_cov, "coverage")

    ros = panel.rosters
    pivot_ros = ros.loc[ros["grade_level"] == pivot]
    cheat = (pivot_ros["cpi_italian"] >= rules.cheating_threshold) | (pivot_ros["cpi_math"] >= rules.cheating_threshold)
    panel = _drop_classes(panel, pivot, set(pivot_ros.loc[cheat, "class_id"]), "cheating")

    if rules.require_class_grades:
        pc = panel.cells.loc[(panel.cells["grade_level"] == pivot) & panel.cells["observed"]]
        has = pc.loc[pc["class_grade"].notna()].groupby(["class_id", "student_id"])["subject"].nunique()
        full = has.reindex(pd.MultiIndex.from_frame(pc[["class_id", "student_id"]].drop_duplicates())).fillna(0)
        incomplete = set(full.loc[full < len(SUBJECTS)].index.get_level_values("class_id"))
        panel = _drop_classes(panel, pivot, incomplete, "class_grades")

    if rules.required_grades:
        c = panel.cells
        ok = c.loc[c["observed"] & c["test_score_pctl"].notna() & c["grade_level"].isin(rules.required_grades)]
        n_have = ok.groupby("student_id").size()
        target = len(rules.required_grades) * len(SUBJECTS)
        complete = set(n_have.loc[n_have >= target].index)
        students = panel.students.copy()
        before = int(students["in_sample"].sum())
        students["in_sample"] = students["in_sample"] & students["student_id"].isin(complete)
        entry = {
            "rule": "outcome_grades",
            "classes_dropped": 0,
            "students_dropped": before - int(students["in_sample"].sum()),
        }
        panel = panel.replace(students=students, selection_log=panel.selection_log + (entry,))

    if panel.rosters.loc[panel.rosters["grade_level"] == pivot].empty or not panel.students["in_sample"].any():
        raise EmptySelection("no class survives the selection rules")
    return panel


def coverage_mean(panel: Panel, grade_level: int = 5) -> float:
    r = panel.rosters
    return float(r.loc[r["grade_level"] == grade_level, "coverage"].mean())

