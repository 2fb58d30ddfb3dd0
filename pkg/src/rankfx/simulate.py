"""Synthetic cohorts with a fully known data-generating process.

Every functional form below is a modelling choice of this package.

Ability.  Class ``c`` has mean ``mu_c ~ N(0, ability_class_mean_sd^2)`` and
spread ``sigma_c = ability_within_sd * exp(s * u_c - s^2)`` with
``s = ability_class_var_spread`` (so ``E[sigma_c^2]`` does not move with
``s``).  Student ability in subject ``j`` is
``a_ij = mu_c + sigma_c * (rho * z_i + sqrt(1 - rho^2) * z_ij)``.

Scores in grade 5.  Test score ``a_ij + test noise``.  Class grade: latent
``a_ij + teacher noise + class leniency``, mapped affinely so the population
has mean ``grade_mean`` and sd ``grade_sd``, rounded to ``grade_step`` and
clamped to [1, 10].  Grade 2 is ``a_ij`` plus fresh test noise.

Future outcomes (grades 8 and 10) are built directly on the national
percentile scale::

    50 + outcome_scale * std(m(a_ij)) + class VA + noise
       + beta * (R^V - 1/2) + delta * (R^I - 1/2)

then rounded and clamped to [1, 100], so ``beta`` is exactly the effect of
the visible rank in percentiles.  ``R^V``, ``R^I`` are the true mean-rule
ranks over the complete class.

Random streams: root seed -> school -> class -> channel.  Students are
positions inside a channel draw.  Noise draws are stored in
:class:`GroundTruth`, so outcomes can be rebuilt with new effects.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.stats

from .datamodel import SUBJECTS, Panel, ecdf_percentile, percentile_convert
from .errors import ConfigInvalid, NotSimulated

MAPS = ("linear", "convex", "piecewise")


@dataclass(frozen=True)
class DgpConfig:
    seed: int = 0
    n_schools: int = 450
    classes_per_school: tuple = (2, 4)
    class_size_mean: float = 14.6
    class_size_sd: float = 5.0
    class_size_min: int = 6
    class_size_max: int = 30
    ability_class_mean_sd: float = 0.5
    ability_within_sd: float = 1.0
    ability_class_var_spread: float = 0.0
    subject_loading: float = 1.0
    teacher_noise_sd: float = 0.6
    test_noise_sd: float = 0.6
    leniency_sd: float = 0.3
    grade_mean: float = 8.0
    grade_sd: float = 1.0
    grade_step: float = 1.0
    beta_visible: float = 8.0
    delta_invisible: float = 0.0
    class_va_sd: float = 5.0
    outcome_scale: float = 15.0
    outcome_noise_sd: float = 8.0
    outcome_ability_map: str = "linear"
    convexity: float = 0.5
    outcome_grades: tuple = (8, 10)
    with_grade2: bool = True
    missing_rate: float = 0.0
    missing_mode: str = "lowest"
    demographic_ability_corr: tuple = (0.0, 0.0, 0.3)
    immigrant_share: float = 0.1
    teacher_ses_loading: float = 0.0
    cpi_mean: float = 0.03
    cheat_share: float = 0.0
    primaries_per_middle: int = 2
    middles_per_high: int = 2
    future_class_size: int = 22
    motivation_beta: float = 0.0
    cohort: int = 2018

    def validate(self) -> None:
        sds = (
            self.class_size_sd,
            self.ability_class_mean_sd,
            self.ability_within_sd,
            self.ability_class_var_spread,
            self.teacher_noise_sd,
            self.test_noise_sd,
            self.leniency_sd,
            self.grade_sd,
            self.class_va_sd,
            self.outcome_scale,
            self.outcome_noise_sd,
        )
        if any(s < 0 for s in sds):
            raise ConfigInvalid("standard deviations must be non-negative")
        if not 0 <= self.subject_loading <= 1:
            raise ConfigInvalid("subject_loading must lie in [0, 1]")
        if not 0 <= self.missing_rate < 1:
            raise ConfigInvalid("missing_rate must lie in [0, 1)")
        if self.class_size_min < 2 or self.class_size_max < self.class_size_min:
            raise ConfigInvalid("class size bounds must satisfy 2 <= min <= max")
        lo, hi = self.classes_per_school
        if lo < 1 or hi < lo or self.n_schools < 1:
            raise ConfigInvalid("need at least one school and one class per school")
        if self.outcome_ability_map not in MAPS:
            raise ConfigInvalid(f"outcome_ability_map must be one of {MAPS}")
        if self.missing_mode not in ("lowest", "random"):
            raise ConfigInvalid("missing_mode must be 'lowest' or 'random'")
        if len(self.demographic_ability_corr) != 3 or any(abs(c) > 1 for c in self.demographic_ability_corr):
            raise ConfigInvalid("demographic_ability_corr needs three values in [-1, 1]")
        if not 0 <= self.cheat_share <= 1 or not 0 < self.cpi_mean < 1:
            raise ConfigInvalid("cheating parameters out of range")
        if self.grade_step < 0:
            raise ConfigInvalid("grade_step must be non-negative")

    def replace(self, **changes) -> "DgpConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in names:
                raise ConfigInvalid(f"unknown DGP field {k!r}")
            kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)


@dataclass(frozen=True)
class GroundTruth:
    """Latent quantities behind a simulated panel. Never read by estimators."""

    students: pd.DataFrame  # one row per (student, subject)
    classes: pd.DataFrame  # one row per (grade-5 class, subject)
    beta_visible: float
    delta_invisible: float
    config: DgpConfig
    seed_lineage: dict = field(default_factory=dict)

    def with_effects(self, beta: float, delta: float) -> "GroundTruth":
        return dataclasses.replace(self, beta_visible=beta, delta_invisible=delta)


def _map_moments(kind: str, kappa: float, var: float):
    sd = math.sqrt(var)
    if kind == "linear":
        return 0.0, sd
    if kind == "convex":
        return kappa * var, math.sqrt(var + 2 * kappa**2 * var**2)
    mean = kappa * sd / math.sqrt(2 * math.pi)
    second = var + kappa**2 * var / 2 + 2 * kappa * var / 2
    return mean, math.sqrt(second - mean**2)


def outcome_map(a: np.ndarray, kind: str, kappa: float) -> np.ndarray:
    if kind == "linear":
        return a
    if kind == "convex":
        return a + kappa * a**2
    return a + kappa * np.maximum(a, 0.0)


def _true_ranks(scores: np.ndarray) -> np.ndarray:
    n = len(scores)
    if n < 2:
        return np.full(n, 0.5)
    ordinal = scipy.stats.rankdata(-scores, method="average")
    return (n - ordinal) / (n - 1)


def _class_sizes(cfg: DgpConfig, rng: np.random.Generator, k: int) -> np.ndarray:
    lo = (cfg.class_size_min - 0.5 - cfg.class_size_mean) / max(cfg.class_size_sd, 1e-12)
    hi = (cfg.class_size_max + 0.5 - cfg.class_size_mean) / max(cfg.class_size_sd, 1e-12)
    draw = scipy.stats.truncnorm.rvs(lo, hi, loc=cfg.class_size_mean, scale=cfg.class_size_sd, size=k, random_state=rng)
    return np.clip(np.rint(draw), cfg.class_size_min, cfg.class_size_max).astype(int)


_CHANNELS = (
    "class",
    "z_common",
    "z_subject",
    "test_noise",
    "teacher_noise",
    "g2_noise",
    "outcome_noise",
    "demographics",
    "missing",
    "motivation",
)


def _draw_school(cfg: DgpConfig, school: int, ss: np.random.SeedSequence):
    """All draws for one primary school; fully determined by its seed sequence."""
    school_rng = np.random.default_rng(ss.spawn(1)[0])
    lo, hi = cfg.classes_per_school
    n_classes = int(school_rng.integers(lo, hi + 1))
    sizes = _class_sizes(cfg, school_rng, n_classes)
    out = []
    for k, (size, css) in enumerate(zip(sizes, ss.spawn(n_classes))):
        ch = dict(zip(_CHANNELS, (np.random.default_rng(s) for s in css.spawn(len(_CHANNELS)))))
        n_future = len(cfg.outcome_grades)
        cls_draw = ch["class"].standard_normal(1 + 1 + 2 + 2)
        out.append(
            {
                "school": school,
                "k": k,
                "size": int(size),
                "mu_z": cls_draw[0],
                "spread_z": cls_draw[1],
                "va_z": cls_draw[2:4],
                "len_z": cls_draw[4:6],
                "cpi_u": ch["class"].random(2),
                "cheat_u": ch["class"].random(2),
                "z_common": ch["z_common"].standard_normal(size),
                "z_subject": ch["z_subject"].standard_normal((size, 2)),
                "test_noise": ch["test_noise"].standard_normal((size, 2)),
                "teacher_noise": ch["teacher_noise"].standard_normal((size, 2)),
                "g2_noise": ch["g2_noise"].standard_normal((size, 2)),
                "outcome_noise": ch["outcome_noise"].standard_normal((size, 2, n_future)),
                "demo": ch["demographics"].standard_normal((size, 3)),
                "missing_u": ch["missing"].random(size),
                "motivation_noise": ch["motivation"].standard_normal(size),
            }
        )
    return out


def _future_classes(student_ids, school_ids, rng, size):
    """Randomly split each school's students into classes of about ``size``."""
    class_of = np.empty(len(student_ids), dtype=object)
    for sch in pd.unique(school_ids):
        idx = np.flatnonzero(school_ids == sch)
        idx = idx[rng.permutation(len(idx))]
        n_cls = max(1, int(round(len(idx) / size)))
        for j, part in enumerate(np.array_split(idx, n_cls)):
            class_of[part] = f"{sch}-c{j:02d}"
    return class_of


def gen_cohort(config: DgpConfig) -> tuple[Panel, GroundTruth]:
    """Generate one cohort and its ground truth."""
    cfg = config
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    school_ss = root.spawn(cfg.n_schools + 1)
    future_rng = np.random.default_rng(school_ss[-1])
    draws = [c for s in range(cfg.n_schools) for c in _draw_school(cfg, s, school_ss[s])]

    rho = cfg.subject_loading
    s = cfg.ability_class_var_spread
    var_a = cfg.ability_class_mean_sd**2 + cfg.ability_within_sd**2
    teach_var = var_a + cfg.teacher_noise_sd**2 + cfg.leniency_sd**2 + cfg.teacher_ses_loading**2
    m_mean, m_sd = _map_moments(cfg.outcome_ability_map, cfg.convexity, var_a + 0.0)
    m_sd = m_sd or 1.0
    f_corr, i_corr, s_corr = cfg.demographic_ability_corr
    imm_cut = scipy.stats.norm.ppf(1 - cfg.immigrant_share)

    stud_rows, cls_rows = [], []
    sid = 0
    for d in draws:
        n = d["size"]
        class_id = f"p{d['school']:04d}-c{d['k']:02d}"
        mu = cfg.ability_class_mean_sd * d["mu_z"]
        sigma = cfg.ability_within_sd * math.exp(s * d["spread_z"] - s * s)
        z_i = d["z_common"]
        a_i = mu + sigma * z_i
        a = mu + sigma * (rho * z_i[:, None] + math.sqrt(1 - rho * rho) * d["z_subject"])
        demo = d["demo"]
        female = f_corr * z_i + math.sqrt(1 - f_corr**2) * demo[:, 0] > 0
        immigrant = i_corr * z_i + math.sqrt(1 - i_corr**2) * demo[:, 1] > imm_cut
        ses = s_corr * z_i + math.sqrt(1 - s_corr**2) * demo[:, 2]
        leniency = cfg.leniency_sd * d["len_z"]
        test5 = a + cfg.test_noise_sd * d["test_noise"]
        grade_latent = (
            a + cfg.teacher_noise_sd * d["teacher_noise"] + leniency[None, :] + cfg.teacher_ses_loading * ses[:, None]
        )
        grade = cfg.grade_mean + cfg.grade_sd * grade_latent / math.sqrt(teach_var)
        if cfg.grade_step > 0:
            grade = np.round(grade / cfg.grade_step) * cfg.grade_step
        grade = np.clip(grade, 1.0, 10.0)
        test2 = a + cfg.test_noise_sd * d["g2_noise"]
        rv = np.column_stack([_true_ranks(grade[:, j]) for j in range(2)])
        ri = np.column_stack([_true_ranks(test5[:, j]) for j in range(2)])
        va = cfg.class_va_sd * d["va_z"]
        std_m = (outcome_map(a, cfg.outcome_ability_map, cfg.convexity) - m_mean) / m_sd
        base = (
            50.0
            + cfg.outcome_scale * std_m[:, :, None]
            + va[None, :, None]
            + cfg.outcome_noise_sd * d["outcome_noise"]
        )
        n_miss = int(round(cfg.missing_rate * n))
        observed = np.ones(n, dtype=bool)
        if n_miss:
            order = np.argsort(a_i, kind="stable") if cfg.missing_mode == "lowest" else np.argsort(d["missing_u"])
            observed[order[:n_miss]] = False
        cheat = d["cheat_u"] < cfg.cheat_share
        cpi = np.where(cheat, 0.5 + 0.5 * d["cpi_u"], scipy.stats.beta.ppf(d["cpi_u"], 1.0, 1.0 / cfg.cpi_mean - 1.0))
        mot_base = 50.0 + cfg.outcome_scale * (a_i / math.sqrt(var_a)) + cfg.outcome_noise_sd * d["motivation_noise"]
        ids = np.array([f"s{sid + j:07d}" for j in range(n)])
        sid += n
        stud_rows.append(
            pd.DataFrame(
                {
                    "student_id": ids,
                    "class_id": class_id,
                    "school_id": f"p{d['school']:04d}",
                    "female": female,
                    "immigrant": immigrant,
                    "ses": ses,
                    "a_i": a_i,
                    "observed": observed,
                    "motivation_base": mot_base,
                    "actual_size": n,
                    **{f"{name}_{subj}": arr[:, j] for name, arr in (
                        ("a", a),
                        ("test5", test5),
                        ("grade5", grade),
                        ("test2", test2),
                        ("rv", rv),
                        ("ri", ri),
                    ) for j, subj in enumerate(SUBJECTS)},
                    **{
                        f"base{g}_{subj}": base[:, j, gi]
                        for gi, g in enumerate(cfg.outcome_grades)
                        for j, subj in enumerate(SUBJECTS)
                    },
                }
            )
        )
        for j, subj in enumerate(SUBJECTS):
            cls_rows.append(
                {
                    "class_id": class_id,
                    "subject": subj,
                    "school_id": f"p{d['school']:04d}",
                    "mu": mu,
                    "sigma": sigma,
                    "va": va[j],
                    "leniency": leniency[j],
                    "cpi": float(cpi[j]),
                    "actual_size": n,
                }
            )
    wide = pd.concat(stud_rows, ignore_index=True)
    classes = pd.DataFrame(cls_rows)

    # School hierarchy: primary -> middle -> high; future classes drawn within school.
    p_idx = wide["school_id"].str[1:].astype(int).to_numpy()
    m_idx = p_idx // cfg.primaries_per_middle
    h_idx = m_idx // cfg.middles_per_high
    wide["school_g8"] = np.array([f"m{i:04d}" for i in m_idx])
    wide["school_g10"] = np.array([f"h{i:04d}" for i in h_idx])
    wide["class_g8"] = _future_classes(wide["student_id"].to_numpy(), wide["school_g8"].to_numpy(), future_rng, cfg.future_class_size)
    wide["class_g10"] = _future_classes(wide["student_id"].to_numpy(), wide["school_g10"].to_numpy(), future_rng, cfg.future_class_size)
    wide["ses_percentile"] = ecdf_percentile(wide["ses"])

    truth_students = _truth_students(wide, cfg)
    truth = GroundTruth(
        students=truth_students,
        classes=classes,
        beta_visible=cfg.beta_visible,
        delta_invisible=cfg.delta_invisible,
        config=cfg,
        seed_lineage={"entropy": int(root.entropy), "schools": cfg.n_schools, "channels": list(_CHANNELS)},
    )
    panel = _assemble_panel(wide, classes, truth, cfg)
    return panel, truth


def _truth_students(wide: pd.DataFrame, cfg: DgpConfig) -> pd.DataFrame:
    parts = []
    for subj in SUBJECTS:
        part = pd.DataFrame(
            {
                "student_id": wide["student_id"],
                "subject": subj,
                "class_id": wide["class_id"],
                "a_i": wide["a_i"],
                "a_is": wide[f"a_{subj}"],
                "test5": wide[f"test5_{subj}"],
                "grade5": wide[f"grade5_{subj}"],
                "test2": wide[f"test2_{subj}"],
                "rank_visible": wide[f"rv_{subj}"],
                "rank_invisible": wide[f"ri_{subj}"],
                "motivation_base": wide["motivation_base"],
                "observed": wide["observed"],
            }
        )
        for g in cfg.outcome_grades:
            part[f"outcome_base_g{g}"] = wide[f"base{g}_{subj}"]
        parts.append(part)
    return pd.concat(parts, ignore_index=True)


def _future_score(base, rv, ri, beta, delta):
    y = base + beta * (rv - 0.5) + delta * (ri - 0.5)
    return np.clip(np.rint(y), 1.0, 100.0)


def _motivation(truth: GroundTruth) -> pd.Series:
    ts = truth.students.loc[truth.students["subject"] == "math"]
    beta = truth.config.motivation_beta
    y = np.clip(np.rint(ts["motivation_base"].to_numpy() + beta * (ts["rank_visible"].to_numpy() - 0.5)), 1, 100)
    return pd.Series(y, index=ts["student_id"].to_numpy())


def _assemble_panel(wide: pd.DataFrame, classes: pd.DataFrame, truth: GroundTruth, cfg: DgpConfig) -> Panel:
    ts = truth.students
    observed = ts["observed"].to_numpy()
    grade_rows = []

    def cells_for(grade, class_col, school_col, raw, pctl, cgrade):
        return pd.DataFrame(
            {
                "student_id": ts["student_id"].to_numpy(),
                "subject": ts["subject"].to_numpy(),
                "grade_level": grade,
                "class_id": np.tile(wide[class_col].to_numpy(), len(SUBJECTS)),
                "school_id": np.tile(wide[school_col].to_numpy(), len(SUBJECTS)),
                "test_score_raw": np.where(observed, raw, np.nan),
                "test_score_pctl": np.where(observed, pctl, np.nan) if pctl is not None else np.nan,
                "class_grade": np.where(observed, cgrade, np.nan) if cgrade is not None else np.nan,
                "observed": observed,
            }
        )

    wide = wide.copy()
    wide["class_g2"] = wide["class_id"].str.replace("-c", "-g2c", regex=False)
    if cfg.with_grade2:
        grade_rows.append(cells_for(2, "class_g2", "school_id", ts["test2"].to_numpy(), None, None))
    grade_rows.append(cells_for(5, "class_id", "school_id", ts["test5"].to_numpy(), None, ts["grade5"].to_numpy()))
    for g in cfg.outcome_grades:
        y = _future_score(
            ts[f"outcome_base_g{g}"].to_numpy(),
            ts["rank_visible"].to_numpy(),
            ts["rank_invisible"].to_numpy(),
            truth.beta_visible,
            truth.delta_invisible,
        )
        grade_rows.append(cells_for(g, f"class_g{g}", f"school_g{g}", y, y, None))
    cells = pd.concat(grade_rows, ignore_index=True)
    cells = cells.sort_values(["student_id", "grade_level", "subject"], kind="stable").reset_index(drop=True)

    students = pd.DataFrame(
        {
            "student_id": wide["student_id"],
            "cohort": cfg.cohort,
            "female": wide["female"].astype(bool),
            "immigrant": wide["immigrant"].astype(bool),
            "ses": wide["ses"],
            "ses_percentile": wide["ses_percentile"],
            "in_sample": True,
        }
    )
    mot = _motivation(truth)
    students["motivation"] = np.where(wide["observed"], mot.reindex(wide["student_id"]).to_numpy(), np.nan)

    rosters = _rosters(cells, classes)
    panel = Panel(students, cells, rosters, provenance="simulated", meta={"seed": cfg.seed})
    for g in (2, 5) if cfg.with_grade2 else (5,):
        for subj in SUBJECTS:
            panel = percentile_convert(panel, g, subj)
    panel.validate()
    return panel


def _rosters(cells: pd.DataFrame, classes: pd.DataFrame) -> pd.DataFrame:
    per = cells.drop_duplicates(["student_id", "class_id"])
    g = per.groupby("class_id", sort=True)
    ros = pd.DataFrame(
        {
            "school_id": g["school_id"].first(),
            "grade_level": g["grade_level"].first(),
            "actual_size": g.size(),
            "n_observed": g["observed"].sum(),
        }
    )
    ros["coverage"] = ros["n_observed"] / ros["actual_size"]
    cpi = classes.pivot(index="class_id", columns="subject", values="cpi")
    for subj in SUBJECTS:
        ros[f"cpi_{subj}"] = cpi[subj].reindex(ros.index).fillna(0.0)
    ros = ros.reset_index()
    ros["n_observed"] = ros["n_observed"].astype(np.int64)
    ros["actual_size"] = ros["actual_size"].astype(np.int64)
    return ros


def inject_rank_effect(panel: Panel, truth: GroundTruth, beta: float, delta: float) -> Panel:
    """Rebuild future outcomes with new rank effects, replaying the stored noise."""
    if panel.provenance != "simulated":
        raise NotSimulated("rank effects can only be injected into simulated panels")
    cells = panel.cells.copy()
    ts = truth.students.set_index(["student_id", "subject"])
    for g in truth.config.outcome_grades:
        mask = (cells["grade_level"] == g) & cells["observed"]
        key = pd.MultiIndex.from_frame(cells.loc[mask, ["student_id", "subject"]])
        t = ts.reindex(key)
        y = _future_score(
            t[f"outcome_base_g{g}"].to_numpy(), t["rank_visible"].to_numpy(), t["rank_invisible"].to_numpy(), beta, delta
        )
        cells.loc[mask, "test_score_raw"] = y
        cells.loc[mask, "test_score_pctl"] = y
    return panel.replace(cells=cells, meta={**panel.meta, "beta": beta, "delta": delta})


def write_truth(truth: GroundTruth, out_dir) -> None:
    """Ground-truth sidecar: per-student and per-class CSVs plus a JSON header."""
    import json
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth.students.to_csv(out / "truth_students.csv", index=False, float_format="%.12g", lineterminator="\n")
    truth.classes.to_csv(out / "truth_classes.csv", index=False, float_format="%.12g", lineterminator="\n")
    header = {
        "beta_visible": truth.beta_visible,
        "delta_invisible": truth.delta_invisible,
        "config": truth.config.to_dict(),
        "seed_lineage": truth.seed_lineage,
    }
    (out / "truth.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
