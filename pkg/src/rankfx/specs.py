"""Regression specifications for the two-rank design.

Each :class:`SpecKind` maps to a design: focal rank columns, explicit
controls, and the dummy blocks absorbed as fixed-effect dimensions.  Every
design carries an audit table listing each model symbol and where it went
(focal column, explicit control or absorbed dimension).

The stacked sample has one row per (student, subject) at the pivot grade.
Students missing either subject are dropped entirely.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import hdfe
from .datamodel import SUBJECTS, Panel
from .errors import ConfigInvalid, FeNotRecovered, MissingGrade2, MissingGroups, MissingRanks, TooFewClasses
from .ranking import N_VENTILES, rank_all, ventile_index

DEMOGRAPHICS = ("female", "immigrant", "ses_percentile")


class SpecKind(enum.Enum):
    MW = "mw"
    DMW = "dmw"
    BOTH_RANKS_UNCOND = "uncond"
    SIMPLE = "simple"
    MAIN = "main"
    VENTILES = "ventiles"
    CLASS_SIZE = "classsize"
    PEER_QUALITY = "peerquality"
    MOTIVATION = "motivation"
    TIE_AUGMENTED = "tieaug"

    @classmethod
    def parse(cls, value) -> "SpecKind":
        if isinstance(value, cls):
            return value
        v = str(value).strip().lower()
        for k in cls:
            if v in (k.value, k.name.lower()):
                return k
        raise ConfigInvalid(f"unknown specification {value!r}")


# Kinds whose controls are the full main-specification block.
_GAMMA_KINDS = {
    SpecKind.MAIN,
    SpecKind.VENTILES,
    SpecKind.CLASS_SIZE,
    SpecKind.PEER_QUALITY,
    SpecKind.MOTIVATION,
    SpecKind.TIE_AUGMENTED,
}


@dataclass(frozen=True)
class SpecParams:
    """Group counts and options.  Defaults follow the published design."""

    dmw_bins: tuple = (6, 6, 6)
    d_bins: int = 25
    g_bins: int = 50
    e_bins: tuple = (25, 75)
    size_range: tuple = (5, 26)
    ventile_ref: int = 10
    peer_mode: str = "quality"  # or "own": interact with own-score ventiles
    control_mode: str = "dummies"  # or "quartic"
    demographics: bool | None = None  # None: per-kind default
    student_fe: bool = True
    motivation_subject: str = "math"
    tolerance: float = 1e-8
    max_sweeps: int = 10_000
    method: str = "cg"
    dof: str = "nested"
    recover_fe: bool = False
    min_tie_rows: int = 200

    def replace(self, **kw) -> "SpecParams":
        return dataclasses.replace(self, **kw)

    def plan(self, dims) -> hdfe.AbsorptionPlan:
        return hdfe.AbsorptionPlan(
            tuple(dims), tolerance=self.tolerance, max_sweeps=self.max_sweeps, method=self.method, dof=self.dof
        )


def desk_params(n_classes: int, **kw) -> SpecParams:
    """Group counts scaled down for a cohort with ``n_classes`` classes per subject.

    Keeps roughly the published classes-per-group density for the finest
    partition (about seven classes per mean x variance cell).
    """
    e_total = max(4, n_classes // 7)
    e_mean = max(2, int(round(np.sqrt(e_total / 3))))
    e_var = max(2, e_total // e_mean)
    return SpecParams(
        d_bins=min(25, max(2, n_classes // 20)),
        g_bins=min(50, max(2, n_classes // 10)),
        e_bins=(e_mean, e_var),
        **kw,
    )


# ---------------------------------------------------------------- groups


def quantile_bins(values, n_bins: int, keys=None) -> np.ndarray:
    """Bins 1..n_bins from type-1 empirical quantile cut points.

    ``bin = 1 + #{cut points < value}`` so equal values always share a bin.
    ``keys`` only fixes the sort order of ties (deterministic, no effect on
    the result).
    """
    v = np.asarray(values, dtype=float)
    n = len(v)
    if n < n_bins:
        raise TooFewClasses(f"{n} classes cannot fill {n_bins} bins")
    order = np.lexsort((np.asarray(keys), v)) if keys is not None else np.argsort(v, kind="stable")
    s = v[order]
    idx = np.ceil(n * np.arange(1, n_bins) / n_bins).astype(int) - 1
    cuts = s[idx]
    return 1 + np.searchsorted(cuts, v, side="left")


def moments(x) -> tuple[float, float, float]:
    """Mean, population variance and kurtosis m4/m2^2 (0 when the variance is 0)."""
    x = np.asarray(x, dtype=float)
    m = x.mean()
    d = x - m
    m2 = float(np.mean(d**2))
    m4 = float(np.mean(d**4))
    return float(m), m2, (m4 / m2**2 if m2 > 0 else 0.0)


@dataclass(frozen=True)
class ClassMomentGroups:
    table: pd.DataFrame  # indexed by (class_id, subject)
    params: SpecParams

    def bins(self, column: str) -> pd.Series:
        return self.table[column]


def class_moment_groups(panel: Panel, params: SpecParams = SpecParams(), pivot_grade: int = 5) -> ClassMomentGroups:
    """Class-level moments of grade-5 scores and their quantile-bin indices.

    Bins are built per subject over classes with at least two observed
    students.  Columns: ``d`` (test mean), ``g`` (grade mean), ``e_mean``,
    ``e_var``, ``e`` (mean x variance cell) and ``D`` (mean x var x kurtosis
    sixtiles).
    """
    c = panel.cells
    c = c.loc[(c["grade_level"] == pivot_grade) & c["observed"] & c["test_score_pctl"].notna()]
    rows = []
    for (cid, subj), grp in c.groupby(["class_id", "subject"], sort=True):
        if len(grp) < 2:
            continue
        tm, tv, tk = moments(grp["test_score_pctl"])
        g = grp["class_grade"].dropna()
        gm, gv, _ = moments(g) if len(g) else (np.nan, np.nan, np.nan)
        rows.append((cid, subj, len(grp), tm, tv, tk, gm, gv))
    tab = pd.DataFrame(rows, columns=["class_id", "subject", "n", "t_mean", "t_var", "t_kurt", "g_mean", "g_var"])
    parts = []
    b1, b2, b3 = params.dmw_bins
    em, ev = params.e_bins
    for subj, t in tab.groupby("subject", sort=True):
        t = t.copy()
        keys = t["class_id"].to_numpy()
        t["d"] = quantile_bins(t["t_mean"], params.d_bins, keys)
        t["g"] = quantile_bins(t["g_mean"].fillna(t["g_mean"].mean()), params.g_bins, keys)
        t["e_mean"] = quantile_bins(t["t_mean"], em, keys)
        t["e_var"] = quantile_bins(t["t_var"], ev, keys)
        t["e"] = (t["e_mean"] - 1) * ev + t["e_var"]
        dm = quantile_bins(t["t_mean"], b1, keys)
        dv = quantile_bins(t["t_var"], b2, keys)
        dk = quantile_bins(t["t_kurt"], b3, keys)
        t["D"] = ((dm - 1) * b2 + (dv - 1)) * b3 + dk
        parts.append(t)
    if not parts:
        raise TooFewClasses("no class with two or more observed students")
    out = pd.concat(parts).set_index(["class_id", "subject"]).sort_index()
    return ClassMomentGroups(out, params)


# ---------------------------------------------------------------- samples


def _outcome(panel: Panel, base: pd.DataFrame, outcome: str) -> pd.Series:
    grades = {"g2": 2, "g5": 5, "g8": 8, "g10": 10, "g13": 13}
    c = panel.cells
    if outcome in grades:
        sl = c.loc[(c["grade_level"] == grades[outcome]) & c["observed"], ["student_id", "subject", "test_score_pctl"]]
        if sl.empty:
            err = MissingGrade2 if outcome == "g2" else ConfigInvalid
            raise err(f"no observed {outcome} scores in the panel")
        s = sl.set_index(["student_id", "subject"])["test_score_pctl"]
        return pd.Series(s.reindex(pd.MultiIndex.from_frame(base[["student_id", "subject"]])).to_numpy(), index=base.index)
    if outcome in panel.students.columns:
        s = panel.students.set_index("student_id")[outcome]
        return pd.Series(s.reindex(base["student_id"]).to_numpy(dtype=float), index=base.index)
    if outcome in base.columns:
        return base[outcome].astype(float)
    raise ConfigInvalid(f"unknown outcome selector {outcome!r}")


def _cluster(panel: Panel, base: pd.DataFrame, cluster: str) -> pd.Series:
    c = panel.cells
    if cluster in ("class_g5", "class"):
        return base["class_id"].astype(str)
    if cluster in ("school_g5", "school_g2"):
        return base["school_id"].astype(str)
    if cluster.startswith("school_g") or cluster.startswith("class_g"):
        g = int(cluster.split("_g")[1])
        col = "school_id" if cluster.startswith("school") else "class_id"
        sl = c.loc[c["grade_level"] == g].drop_duplicates("student_id").set_index("student_id")[col]
        if sl.empty:
            raise ConfigInvalid(f"no grade-{g} records for cluster {cluster!r}")
        return pd.Series(sl.reindex(base["student_id"]).to_numpy(), index=base.index)
    if cluster in base.columns:
        return base[cluster].astype(str)
    raise ConfigInvalid(f"unknown cluster selector {cluster!r}")


DEFAULT_CLUSTER = {"g2": "school_g5", "g8": "school_g8", "g10": "school_g10", "g13": "school_g10"}


def default_cluster(kind: SpecKind, outcome: str) -> str:
    if kind is SpecKind.MOTIVATION:
        return "school_g10"
    return DEFAULT_CLUSTER.get(outcome, "class_g5")


def stacked_sample(panel: Panel, pivot_grade: int = 5) -> pd.DataFrame:
    """Pivot-grade rows with ranks, sizes and demographics attached."""
    c = panel.cells
    base = c.loc[(c["grade_level"] == pivot_grade) & c["observed"]].copy()
    sizes = panel.rosters.set_index("class_id")["actual_size"]
    base["actual_size"] = sizes.reindex(base["class_id"]).to_numpy()
    st = panel.students.set_index("student_id")
    for col in DEMOGRAPHICS:
        if col in st.columns and col not in base.columns:
            base[col] = st[col].reindex(base["student_id"]).to_numpy(dtype=float)
    if "in_sample" in st.columns:
        keep = st["in_sample"].reindex(base["student_id"]).fillna(False).to_numpy(dtype=bool)
        base = base.loc[keep]
    return base.sort_values(["student_id", "subject"], kind="stable").reset_index(drop=True)


# ---------------------------------------------------------------- designs


@dataclass
class Design:
    kind: SpecKind
    frame: pd.DataFrame
    outcome: str
    focal: list
    controls: list
    fe_dims: list
    cluster: str
    audit: list = field(default_factory=list)
    labels: dict = field(default_factory=dict)

    def audit_table(self) -> pd.DataFrame:
        return pd.DataFrame(self.audit, columns=["symbol", "role", "column", "note"])


def _code(*cols) -> np.ndarray:
    """Integer code for the product of several categorical columns."""
    keys = pd.DataFrame({f"k{i}": np.asarray(c) for i, c in enumerate(cols)})
    return keys.groupby(list(keys.columns), sort=True).ngroup().to_numpy()


def _require_ranks(base: pd.DataFrame, sources):
    for s in sources:
        col = f"R_{s}"
        if col not in base.columns or base[col].isna().all():
            raise MissingRanks(f"{s} ranks are missing; run the rank step first")


def _ventile_columns(frame: pd.DataFrame, source: str, ref: int, audit: list) -> list:
    R = frame[f"R_{source}"].to_numpy()
    v = ventile_index(frame[f"ord_{source}"].to_numpy(), frame["actual_size"].to_numpy())
    top, bot = R == 1.0, R == 0.0
    cols = []
    tag = "V" if source == "visible" else "I"
    frame[f"top_{source}"] = top.astype(float)
    frame[f"bot_{source}"] = bot.astype(float)
    cols += [f"top_{source}", f"bot_{source}"]
    audit.append((f"1[R^{tag}=1]", "focal", f"top_{source}", ""))
    audit.append((f"1[R^{tag}=0]", "focal", f"bot_{source}", ""))
    for k in range(1, N_VENTILES + 1):
        if k == ref:
            continue
        # endpoint rows carry only their endpoint flag
        d = (v == k) & ~top & ~bot
        if not d.any():
            continue
        name = f"v{k:02d}_{source}"
        frame[name] = d.astype(float)
        cols.append(name)
        audit.append((f"1[d^{tag}={k}]", "focal", name, "endpoint rows suppressed"))
    return cols


def _leave_out_mean(frame: pd.DataFrame, col: str) -> np.ndarray:
    g = frame.groupby(["class_id", "subject"])[col]
    s, n = g.transform("sum").to_numpy(), g.transform("size").to_numpy()
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 1, (s - frame[col].to_numpy()) / (n - 1), np.nan)


def _per_subject_bins(frame: pd.DataFrame, col: str, n_bins: int) -> np.ndarray:
    out = np.zeros(len(frame), dtype=int)
    for subj, idx in frame.groupby("subject").indices.items():
        out[idx] = quantile_bins(frame[col].to_numpy()[idx], n_bins, frame["student_id"].to_numpy()[idx])
    return out


def build_design(
    panel: Panel,
    kind,
    outcome: str = "g8",
    cluster: str | None = None,
    params: SpecParams = SpecParams(),
    groups: ClassMomentGroups | None = None,
) -> Design:
    kind = SpecKind.parse(kind)
    cluster = cluster or default_cluster(kind, outcome)
    pivot = panel.meta.get("ranks", {}).get("visible", {}).get("pivot_grade", 5)
    base = stacked_sample(panel, pivot)
    sources = ["invisible"] if kind in (SpecKind.MW, SpecKind.DMW) else ["visible", "invisible"]
    _require_ranks(base, sources)
    audit: list = []

    base["y"] = _outcome(panel, base, outcome)
    base["cl"] = _cluster(panel, base, cluster)
    base["T5"] = base["test_score_pctl"]
    base["C"] = np.rint(base["class_grade"])
    need = ["y", "cl", "T5"] + [f"R_{s}" for s in sources]
    if kind not in (SpecKind.MW, SpecKind.DMW, SpecKind.BOTH_RANKS_UNCOND):
        need.append("C")

    if kind is SpecKind.MOTIVATION:
        if params.motivation_subject not in SUBJECTS:
            raise ConfigInvalid(f"motivation_subject must be one of {SUBJECTS}")
        base = base.loc[base["subject"] == params.motivation_subject]
    if kind is SpecKind.CLASS_SIZE:
        lo, hi = params.size_range
        base = base.loc[base["actual_size"].between(lo, hi)]

    demo = params.demographics
    if demo is None:
        demo = kind in (SpecKind.MW, SpecKind.DMW, SpecKind.MOTIVATION)
    demo_cols = [c for c in DEMOGRAPHICS if c in base.columns] if demo else []
    need += demo_cols
    frame = base.dropna(subset=need).copy()
    if kind is not SpecKind.MOTIVATION:
        both = frame.groupby("student_id")["subject"].transform("nunique") == len(SUBJECTS)
        frame = frame.loc[both]
    frame = frame.reset_index(drop=True)
    audit.append(("T^g", "outcome", "y", outcome))

    needs_groups = kind is SpecKind.DMW or (kind in _GAMMA_KINDS and params.control_mode == "dummies")
    if needs_groups or kind in _GAMMA_KINDS:
        if groups is None:
            groups = class_moment_groups(panel, params, pivot)
        key = pd.MultiIndex.from_frame(frame[["class_id", "subject"]])
        gt = groups.table.reindex(key)
        if gt["d"].isna().any():
            raise MissingGroups("some classes in the sample have no moment group")
        for col in ("d", "g", "e", "D"):
            frame[f"grp_{col}"] = gt[col].to_numpy().astype(np.int64)

    focal: list
    controls: list = []
    frame["cs"] = _code(frame["class_id"], frame["subject"])
    fe = ["cs"]
    audit.append(("theta_cs", "absorbed", "cs", "class x subject"))

    if kind is SpecKind.MW:
        focal = ["R_invisible"]
        frame["T5_fe"] = frame["T5"].astype(np.int64)
        fe.append("T5_fe")
        audit.append(("1[T^5=t]", "absorbed", "T5_fe", "100 percentile dummies"))
    elif kind is SpecKind.DMW:
        focal = ["R_invisible"]
        frame["T5xD"] = _code(frame["T5"], frame["grp_D"])
        fe.append("T5xD")
        audit.append(("1[T^5=t]1[d_c=D]", "absorbed", "T5xD", "mean x var x kurtosis sixtiles"))
    elif kind is SpecKind.BOTH_RANKS_UNCOND:
        focal = ["R_visible", "R_invisible"]
    elif kind is SpecKind.SIMPLE:
        focal = ["R_visible", "R_invisible"]
        frame["T5_fe"] = frame["T5"].astype(np.int64)
        frame["C_fe"] = frame["C"].astype(np.int64)
        fe += ["T5_fe", "C_fe"]
        audit.append(("1[T^5=t]", "absorbed", "T5_fe", "100 percentile dummies"))
        audit.append(("1[C=k]", "absorbed", "C_fe", "rounded class grade"))
    else:
        fe += _gamma(frame, kind, params, audit, controls)
        focal = _focal_for(frame, kind, params, audit)

    if kind in (SpecKind.MW, SpecKind.DMW, SpecKind.BOTH_RANKS_UNCOND, SpecKind.SIMPLE):
        for f in focal:
            audit.append(("R^V" if f == "R_visible" else "R^I", "focal", f, ""))
    for c in demo_cols:
        controls.append(c)
        audit.append((f"x_i:{c}", "control", c, ""))

    return Design(kind, frame, "y", focal, controls, fe, "cl", audit, {"outcome": outcome, "cluster": cluster})


def _gamma(frame, kind, params, audit, controls) -> list:
    """Main-specification control block; returns the absorbed dimension names."""
    dims = []
    if params.student_fe and kind is not SpecKind.MOTIVATION:
        frame["student"] = _code(frame["student_id"])
        dims.append("student")
        audit.append(("gamma_i", "absorbed", "student", "student fixed effect"))
    if params.control_mode == "quartic":
        t = frame["T5"].to_numpy() / 100.0
        for p in range(1, 5):
            frame[f"T5^{p}"] = t**p
            controls.append(f"T5^{p}")
            audit.append((f"(T^5)^{p}", "control", f"T5^{p}", "quartic mode"))
    elif params.control_mode == "dummies":
        frame["T5xd"] = _code(frame["T5"], frame["grp_d"])
        dims.append("T5xd")
        audit.append(("1[T^5=t]1[d_c=D]", "absorbed", "T5xd", f"{params.d_bins} test-mean groups"))
    else:
        raise ConfigInvalid(f"unknown control_mode {params.control_mode!r}")
    frame["Cxg"] = _code(frame["C"], frame["grp_g"])
    frame["Cxe"] = _code(frame["C"], frame["grp_e"])
    dims += ["Cxg", "Cxe"]
    audit.append(("1[C=k]1[g_c=G]", "absorbed", "Cxg", f"{params.g_bins} grade-mean groups"))
    e1, e2 = params.e_bins
    audit.append(("1[C=k]1[e_c=E]", "absorbed", "Cxe", f"{e1}x{e2} test mean x variance groups"))
    return dims


def _focal_for(frame, kind, params, audit) -> list:
    if kind in (SpecKind.MAIN, SpecKind.MOTIVATION):
        audit.append(("R^V", "focal", "R_visible", ""))
        audit.append(("R^I", "focal", "R_invisible", ""))
        return ["R_visible", "R_invisible"]
    if kind is SpecKind.VENTILES:
        return _ventile_columns(frame, "visible", params.ventile_ref, audit) + _ventile_columns(
            frame, "invisible", params.ventile_ref, audit
        )
    if kind is SpecKind.CLASS_SIZE:
        cols = []
        lo, hi = params.size_range
        for source, tag in (("visible", "V"), ("invisible", "I")):
            for k in range(lo, hi + 1):
                m = frame["actual_size"].to_numpy() == k
                if not m.any():
                    continue
                name = f"R_{source}_x_size{k:02d}"
                frame[name] = frame[f"R_{source}"].to_numpy() * m
                cols.append(name)
                audit.append((f"R^{tag} x 1[Size={k}]", "focal", name, ""))
        return cols
    if kind is SpecKind.PEER_QUALITY:
        if params.peer_mode == "quality":
            # a lone observed member has no peers; fall back to its own score
            frame["peer_q"] = _leave_out_mean(frame, "T5")
            frame["peer_q"] = frame["peer_q"].fillna(frame["T5"])
            bins = _per_subject_bins(frame, "peer_q", N_VENTILES)
            label = "peer-quality ventile"
        elif params.peer_mode == "own":
            bins = _per_subject_bins(frame, "T5", N_VENTILES)
            label = "own-score ventile"
        else:
            raise ConfigInvalid(f"unknown peer_mode {params.peer_mode!r}")
        frame["pq_bin"] = bins
        cols = ["R_visible"]
        audit.append(("R^V", "focal", "R_visible", f"reference {label} {params.ventile_ref}"))
        for source, tag in (("visible", "V"), ("invisible", "I")):
            for k in range(1, N_VENTILES + 1):
                if source == "visible" and k == params.ventile_ref:
                    continue
                m = bins == k
                if not m.any():
                    continue
                name = f"R_{source}_x_q{k:02d}"
                frame[name] = frame[f"R_{source}"].to_numpy() * m
                cols.append(name)
                audit.append((f"R^{tag} x 1[d={k}]", "focal", name, label))
        return cols
    if kind is SpecKind.TIE_AUGMENTED:
        t = frame["ties_visible"].to_numpy().astype(int) - 1
        # pool the rare large tie sizes into one top bucket
        counts = np.bincount(t)
        tail = np.cumsum(counts[::-1])[::-1]
        small = np.flatnonzero((tail < params.min_tie_rows) & (np.arange(len(counts)) > 0))
        if len(small):
            cap = max(int(small[0]) - 1, 1)
            t = np.minimum(t, cap)
        frame["tie_k"] = t
        cols = ["R_visible", "R_invisible"]
        audit.append(("R^S", "focal", "R_visible", "base effect for untied students"))
        audit.append(("R^U", "focal", "R_invisible", ""))
        for k in sorted(set(t) - {0}):
            name = f"R_visible_x_tie{k:02d}"
            frame[name] = frame["R_visible"].to_numpy() * (t == k)
            cols.append(name)
            audit.append((f"R x 1[t={k}]", "focal", name, ""))
        return cols
    raise ConfigInvalid(f"no focal set for {kind}")


def build_and_fit(
    panel: Panel,
    kind,
    outcome: str = "g8",
    cluster: str | None = None,
    params: SpecParams = SpecParams(),
    groups: ClassMomentGroups | None = None,
) -> hdfe.FitResult:
    design = build_design(panel, kind, outcome, cluster, params, groups)
    return fit_design(design, params)


def fit_design(design: Design, params: SpecParams = SpecParams()) -> hdfe.FitResult:
    frame = design.frame
    fe = list(design.fe_dims)
    if design.kind is SpecKind.TIE_AUGMENTED:
        fe.append("tie_k")
        design.audit.append(("1[t=k]", "absorbed", "tie_k", "tie-size dummies, reference untied"))
    res = hdfe.fit(
        frame,
        design.outcome,
        design.focal,
        params.plan(fe),
        design.cluster,
        controls=design.controls,
        recover_fe=params.recover_fe,
    )
    res.meta.update(
        {
            "spec": design.kind.value,
            "outcome": design.labels.get("outcome"),
            "cluster": design.labels.get("cluster"),
            "params": params,
            "audit": design.audit_table(),
            "n_students": int(frame["student_id"].nunique()),
        }
    )
    return res


# ---------------------------------------------------------------- extensions


def tie_augmented_fit(panel: Panel, rule: str = "mean", outcome: str = "g8", cluster=None, params=SpecParams(), groups=None):
    """Main fit with tie-size dummies and rank x tie-size interactions under ``rule``."""
    pivot = panel.meta.get("ranks", {}).get("visible", {}).get("pivot_grade", 5)
    ranked = rank_all(panel, rule, pivot)
    return build_and_fit(ranked, SpecKind.TIE_AUGMENTED, outcome, cluster, params, groups)


@dataclass(frozen=True)
class ValueAdded:
    values: pd.Series  # mean-zero, indexed by (class_id, subject)
    sd: float
    sd_corrected: float
    one_sd_effects: dict
    identified: bool


def class_value_added(fit: hdfe.FitResult, panel: Panel) -> ValueAdded:
    """Class-by-subject effects from a fit run with FE recovery.

    With a student effect in the same fit, each class level is confounded
    with its students' effects; the values are then flagged as not
    identified.  :func:`value_added_fit` runs the variant that is.
    """
    if not fit.fe_values or "cs" not in fit.fe_values:
        raise FeNotRecovered("the class x subject effects were not recovered; fit with recover_fe=True")
    values = fit.fe_values["cs"] - fit.fe_values["cs"].mean()
    sd = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    noise = float(fit.meta.get("cs_noise_var", 0.0))
    sd_corr = float(np.sqrt(max(sd**2 - noise, 0.0)))
    base = stacked_sample(panel)
    effects = {"class_quality": sd_corr}
    for name in fit.names:
        if name in base.columns:
            effects[name] = float(base[name].std(ddof=1) * fit.params[name])
    identified = "student" not in fit.fe_dims
    return ValueAdded(values, sd, sd_corr, effects, identified)


def value_added_fit(panel: Panel, outcome="g8", cluster=None, params: SpecParams = SpecParams(), groups=None):
    """Main controls without the student effect, demographics explicit, FE recovered."""
    p = params.replace(student_fe=False, recover_fe=True, demographics=True)
    design = build_design(panel, SpecKind.MAIN, outcome, cluster, p, groups)
    res = fit_design(design, p)
    frame = design.frame
    keys = frame.groupby("cs")[["class_id", "subject"]].first()
    theta = res.fe_values["cs"]
    res.fe_values["cs"] = pd.Series(
        theta.to_numpy(), index=pd.MultiIndex.from_frame(keys.reindex(theta.index).reset_index(drop=True))
    )
    # sampling noise in a cell mean: residual variance over cell size
    resid_var = res.meta.get("resid_var")
    n_cs = frame.groupby("cs").size().reindex(theta.index).to_numpy()
    if resid_var is not None:
        res.meta["cs_noise_var"] = float(np.mean(resid_var / n_cs))
    return res
