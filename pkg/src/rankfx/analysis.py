"""Placebo and balance checks, estimator comparisons and the weak-student study."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.stats

from . import hdfe
from .datamodel import Panel
from .errors import EmptySubset, MethodInfeasible, MissingGrade2, RankfxError
from .ranking import rank_all
from .specs import DEMOGRAPHICS, SpecKind, SpecParams, build_and_fit, build_design, fit_design

ALPHA = 0.05


@dataclass(frozen=True)
class CheckReport:
    """Numbers behind a check plus the rule that turns them into a verdict.

    ``rule`` is ``"all_insignificant"`` (every p-value at or above
    ``threshold``) or ``"within"`` (every ``|estimate| < threshold * se``).
    ``judged`` restricts the verdict to entries with those labels; the rest
    are context.
    """

    name: str
    entries: tuple  # dicts: label, coef, estimate, se, pvalue
    threshold: float = ALPHA
    rule: str = "all_insignificant"
    provenance: dict = field(default_factory=dict)
    judged: tuple = ()

    @property
    def verdict(self) -> str:
        entries = [e for e in self.entries if not self.judged or e["label"] in self.judged]
        if self.rule == "all_insignificant":
            ok = all(e["pvalue"] >= self.threshold for e in entries)
        elif self.rule == "within":
            ok = all(abs(e["estimate"]) < self.threshold * e["se"] for e in entries)
        else:
            raise ValueError(f"unknown rule {self.rule!r}")
        return "pass" if ok else "fail"

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def table(self) -> pd.DataFrame:
        return pd.DataFrame(list(self.entries))

    def to_dict(self) -> dict:
        prov = {k: (v if isinstance(v, (str, int, float, bool, type(None))) else str(v)) for k, v in self.provenance.items()}
        return {
            "name": self.name,
            "verdict": self.verdict,
            "rule": self.rule,
            "threshold": self.threshold,
            "entries": [dict(e) for e in self.entries],
            "provenance": prov,
        }


def _entry(fit: hdfe.FitResult, coef: str, label: str = "") -> dict:
    if fit.meta.get("outcome_absorbed"):
        # the outcome lives inside the absorbed space: nothing left to explain
        return {"label": label, "coef": coef, "estimate": 0.0, "se": 0.0, "pvalue": 1.0, "note": "absorbed"}
    return {
        "label": label,
        "coef": coef,
        "estimate": float(fit.params[coef]),
        "se": float(fit.se[coef]),
        "pvalue": fit.pvalue(coef),
        "note": "",
    }


def _rank_coefs(fit: hdfe.FitResult) -> list:
    return [n for n in ("R_visible", "R_invisible") if n in fit.names]


def ability_placebo(panel: Panel, kind=SpecKind.MAIN, params: SpecParams = SpecParams(), cluster=None, alpha=ALPHA):
    """Rank coefficients with the grade-2 score as outcome; pass iff all insignificant."""
    c = panel.cells
    if not ((c["grade_level"] == 2) & c["observed"] & c["test_score_pctl"].notna()).any():
        raise MissingGrade2("the panel carries no grade-2 scores")
    kind = SpecKind.parse(kind)
    fit = build_and_fit(panel, kind, "g2", cluster, params)
    entries = tuple(_entry(fit, n, "g2") for n in _rank_coefs(fit))
    return CheckReport(
        "ability_placebo",
        entries,
        alpha,
        provenance={"spec": kind.value, "outcome": "g2", "cluster": fit.meta["cluster"], "n_obs": fit.n_obs},
    )


def balance_check(panel: Panel, kind=SpecKind.DMW, params: SpecParams = SpecParams(), cluster="class_g5", alpha=ALPHA):
    """Regress each demographic on the rank(s) under that specification's controls."""
    kind = SpecKind.parse(kind)
    p = params.replace(demographics=False)
    entries = []
    n_obs = {}
    for outcome in DEMOGRAPHICS:
        fit = build_and_fit(panel, kind, outcome, cluster, p)
        n_obs[outcome] = fit.n_obs
        entries += [_entry(fit, n, outcome) for n in _rank_coefs(fit)]
    return CheckReport(
        "balance",
        tuple(entries),
        alpha,
        provenance={"spec": kind.value, "cluster": cluster, "n_obs": str(n_obs)},
    )


# ---------------------------------------------------------------- comparisons


@dataclass(frozen=True)
class Comparison:
    diff: float
    se: float
    pvalue: float
    ratio: float
    method: str
    draws: int = 0


def _pvalue(diff, se):
    if se == 0 or not np.isfinite(se):
        return 1.0 if diff == 0 else 0.0
    return float(2 * scipy.stats.norm.sf(abs(diff / se)))


def compare_estimators(
    fit_a: hdfe.FitResult,
    fit_b: hdfe.FitResult,
    method: str = "cluster_bootstrap",
    coef_a: str | None = None,
    coef_b: str | None = None,
    panel: Panel | None = None,
    draws: int = 400,
    seed: int = 0,
) -> Comparison:
    """Difference ``a - b`` of one coefficient from two fits, with its SE.

    ``cluster_bootstrap`` resamples clusters and refits both designs on each
    draw; it needs the panel the fits came from.  ``independent_approx``
    uses ``sqrt(se_a^2 + se_b^2)``.  ``ratio`` is ``b / a``.
    """
    coef_a = coef_a or _default_coef(fit_a)
    coef_b = coef_b or _default_coef(fit_b)
    a, b = float(fit_a.params[coef_a]), float(fit_b.params[coef_b])
    diff = a - b
    ratio = b / a if a != 0 else np.nan
    if method == "independent_approx":
        se = float(np.hypot(fit_a.se[coef_a], fit_b.se[coef_b]))
        return Comparison(diff, se, _pvalue(diff, se), ratio, method)
    if method != "cluster_bootstrap":
        raise ValueError(f"unknown comparison method {method!r}")
    if fit_a is fit_b:
        return Comparison(0.0, 0.0, 1.0, ratio, method, draws)
    if draws < 2:
        raise MethodInfeasible("a bootstrap needs at least two draws")
    if panel is None or "spec" not in fit_a.meta or "spec" not in fit_b.meta:
        raise MethodInfeasible("bootstrap needs the source panel and fits built by the specs module")

    designs = []
    for fit in (fit_a, fit_b):
        m = fit.meta
        designs.append((build_design(panel, m["spec"], m["outcome"], m["cluster"], m["params"]), m["params"]))
    labels = np.unique(np.concatenate([d.frame[d.cluster].astype(str).to_numpy() for d, _ in designs]))
    index = [d.frame.groupby(d.frame[d.cluster].astype(str)).indices for d, _ in designs]
    rng = np.random.default_rng(seed)
    diffs = []
    for _ in range(draws):
        pick = labels[rng.integers(0, len(labels), len(labels))]
        est = []
        for (design, params), idx, coef in zip(designs, index, (coef_a, coef_b)):
            rows = np.concatenate([idx[c] for c in pick if c in idx])
            sub = dataclasses.replace(design, frame=design.frame.iloc[rows].reset_index(drop=True), audit=list(design.audit))
            try:
                est.append(float(fit_design(sub, params).params[coef]))
            except RankfxError:
                est.append(np.nan)
        diffs.append(est[0] - est[1])
    diffs = np.asarray(diffs)
    diffs = diffs[np.isfinite(diffs)]
    if len(diffs) < 2:
        raise MethodInfeasible("fewer than two bootstrap draws could be refitted")
    se = float(diffs.std(ddof=1))
    return Comparison(diff, se, _pvalue(diff, se), ratio, method, len(diffs))


def _default_coef(fit):
    return "R_visible" if "R_visible" in fit.names else fit.names[0]


# ---------------------------------------------------------------- weak students


def class_size_schedule(size: int) -> int:
    """How many bottom performers to drop from a fully covered class."""
    if size <= 9:
        return 0
    if size <= 19:
        return 1
    if size <= 29:
        return 2
    return 3


def full_coverage_subset(panel: Panel, pivot_grade: int = 5) -> Panel:
    ros = panel.rosters
    full = ros.loc[(ros["grade_level"] == pivot_grade) & (ros["n_observed"] == ros["actual_size"]), "class_id"]
    c = panel.cells
    ids = c.loc[(c["grade_level"] == pivot_grade) & c["class_id"].isin(set(full)), "student_id"].unique()
    if len(ids) == 0:
        raise EmptySubset("no fully covered class")
    keep = set(ids)
    cells = c.loc[c["student_id"].isin(keep)].reset_index(drop=True)
    students = panel.students.loc[panel.students["student_id"].isin(keep)].reset_index(drop=True)
    used = set(cells["class_id"])
    rosters = ros.loc[ros["class_id"].isin(used)].reset_index(drop=True)
    return panel.replace(students=students, cells=cells, rosters=rosters)


def drop_weakest(panel: Panel, pivot_grade: int = 5, schedule=class_size_schedule) -> tuple[Panel, int]:
    """Flag the weakest students (mean class grade) as unobserved at the pivot grade.

    They then sit at the bottom of their class, exactly like missing
    students; ranks must be recomputed afterwards.
    """
    c = panel.cells
    piv = c.loc[(c["grade_level"] == pivot_grade) & c["observed"]]
    score = piv.groupby(["class_id", "student_id"])["class_grade"].mean().reset_index()
    sizes = panel.rosters.set_index("class_id")["actual_size"]
    drop = []
    for cid, grp in score.groupby("class_id", sort=True):
        k = schedule(int(sizes[cid]))
        if k:
            drop += grp.sort_values(["class_grade", "student_id"]).head(k)["student_id"].tolist()
    drop = set(drop)
    cells = c.copy()
    mask = (cells["grade_level"] == pivot_grade) & cells["student_id"].isin(drop)
    cells.loc[mask, "observed"] = False
    st = panel.students.copy()
    st.loc[st["student_id"].isin(drop), "in_sample"] = False
    return panel.replace(cells=cells, students=st), len(drop)


def weak_student_study(panel: Panel, outcome="g8", cluster=None, params: SpecParams = SpecParams(), rule="mean"):
    """Main fit on fully covered classes, then again after dropping the weakest students."""
    base = build_and_fit(panel, SpecKind.MAIN, outcome, cluster, params)
    sub = full_coverage_subset(panel)
    full = build_and_fit(rank_all(sub, rule), SpecKind.MAIN, outcome, cluster, params)
    dropped_panel, n_drop = drop_weakest(sub)
    dropped = build_and_fit(rank_all(dropped_panel, rule), SpecKind.MAIN, outcome, cluster, params)
    entries = (
        _entry(base, "R_visible", "baseline"),
        _entry(full, "R_visible", "full_coverage"),
        _entry(dropped, "R_visible", "weakest_dropped"),
    )
    d = entries[2]["estimate"] - entries[1]["estimate"]
    pooled = float(np.hypot(entries[1]["se"], entries[2]["se"]))
    diff = {"label": "dropped_minus_full", "coef": "R_visible", "estimate": d, "se": pooled, "pvalue": _pvalue(d, pooled), "note": ""}
    return CheckReport(
        "weak_students",
        entries + (diff,),
        2.0,
        rule="within",
        provenance={"outcome": outcome, "students_dropped": n_drop, "n_full": full.meta["n_students"]},
        judged=("dropped_minus_full",),
    )
