"""Monte Carlo runner and the higher-order peer-effect bias demonstration.

Each rep draws an independent cohort from a seed derived from the master
seed, runs the requested estimators, and stores one row per (kind,
outcome, coefficient).  Summaries are recomputed from those rows, so they
do not depend on the order in which reps finish.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.stats

from .datamodel import SelectionConfig, apply_selection
from .errors import ConfigInvalid, RankfxError
from .ranking import rank_all
from .simulate import DgpConfig, gen_cohort
from .specs import SpecKind, SpecParams, build_and_fit, desk_params

FUTURE = ("g8", "g10", "g13")


def rep_seeds(master_seed: int, n_reps: int) -> list[int]:
    """Independent 63-bit cohort seeds, one per rep."""
    children = np.random.SeedSequence(master_seed).spawn(n_reps)
    return [int(c.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1)) for c in children]


def truth_for(coef: str, outcome: str, config: DgpConfig) -> float:
    """True value of a rank coefficient; NaN for coefficients with no scalar truth."""
    if outcome not in FUTURE:
        return 0.0 if coef in ("R_visible", "R_invisible") else np.nan
    if coef == "R_visible":
        return config.beta_visible
    if coef == "R_invisible":
        return config.delta_invisible
    return np.nan


def binomial_band(n: int, p: float = 0.95, level: float = 0.99) -> tuple[int, int]:
    """Exact central binomial interval of counts around nominal ``p``."""
    lo = int(scipy.stats.binom.ppf((1 - level) / 2, n, p))
    hi = int(scipy.stats.binom.isf((1 - level) / 2, n, p))
    return lo, hi


@dataclass
class McStudy:
    config: DgpConfig | list
    n_reps: int
    kinds: tuple
    records: pd.DataFrame
    master_seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_reps < 2:
            raise ConfigInvalid("a Monte Carlo study needs at least two reps")

    def summary(self) -> pd.DataFrame:
        return summarize(self.records)

    def row(self, kind: str, outcome: str, coef: str, config_id: int = 0) -> pd.Series:
        s = self.summary()
        m = (s["kind"] == kind) & (s["outcome"] == outcome) & (s["coef"] == coef) & (s["config_id"] == config_id)
        if not m.any():
            raise KeyError((kind, outcome, coef, config_id))
        return s.loc[m].iloc[0]

    def config_hash(self) -> str:
        cfgs = self.config if isinstance(self.config, list) else [self.config]
        blob = json.dumps([c.to_dict() for c in cfgs], sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def summarize(records: pd.DataFrame) -> pd.DataFrame:
    rows = []
    keys = ["config_id", "kind", "outcome", "coef"]
    for key, g in records.sort_values(keys + ["rep"]).groupby(keys, sort=True):
        est = g["estimate"].to_numpy()
        n = len(est)
        truth = float(g["truth"].iloc[0])
        sd = float(est.std(ddof=1)) if n > 1 else np.nan
        mcse = sd / np.sqrt(n) if n > 1 else np.nan
        bias = float(est.mean() - truth) if np.isfinite(truth) else np.nan
        covered = ((g["ci_low"] <= truth) & (truth <= g["ci_high"])).to_numpy()
        within = (np.abs(est - truth) < 2 * g["se"].to_numpy()) if np.isfinite(truth) else np.zeros(n, bool)
        lo, hi = binomial_band(n)
        rows.append(
            dict(
                zip(keys, key),
                n_reps=n,
                truth=truth,
                mean=float(est.mean()),
                bias=bias,
                mc_sd=sd,
                mc_se=mcse,
                bias_t=bias / mcse if mcse and np.isfinite(bias) else np.nan,
                coverage=int(covered.sum()) if np.isfinite(truth) else -1,
                coverage_band_low=lo,
                coverage_band_high=hi,
                within_2se=int(within.sum()),
                reject_5pct=float((g["pvalue"] < 0.05).mean()),
                mean_se=float(g["se"].mean()),
            )
        )
    return pd.DataFrame(rows)


def _params_for(panel, params):
    if isinstance(params, SpecParams):
        return params
    n = int((panel.rosters["grade_level"] == 5).sum())
    return desk_params(n)


def run_rep(config: DgpConfig, seed: int, kinds, outcomes, params="desk", selection=SelectionConfig(), rule="mean"):
    """One cohort, every (kind, outcome) fit; returns result rows."""
    cfg = config.replace(seed=seed)
    panel, _ = gen_cohort(cfg)
    panel = rank_all(apply_selection(panel, selection), rule)
    prm = _params_for(panel, params)
    out = []
    for kind in kinds:
        kind = SpecKind.parse(kind)
        for outcome in outcomes:
            try:
                fit = build_and_fit(panel, kind, outcome, None, prm)
            except RankfxError as exc:
                out.append({"kind": kind.value, "outcome": outcome, "coef": "", "error": type(exc).__name__})
                continue
            for coef in fit.names:
                lo, hi = fit.conf_int(coef)
                out.append(
                    {
                        "kind": kind.value,
                        "outcome": outcome,
                        "coef": coef,
                        "estimate": float(fit.params[coef]),
                        "se": float(fit.se[coef]),
                        "pvalue": fit.pvalue(coef),
                        "ci_low": lo,
                        "ci_high": hi,
                        "truth": truth_for(coef, outcome, cfg),
                        "n_obs": fit.n_obs,
                        "n_clusters": fit.n_clusters,
                        "converged": fit.converged,
                        "error": "",
                    }
                )
    return out


def _run_many(tasks, threads):
    if threads and threads > 1:
        from joblib import Parallel, delayed

        return Parallel(n_jobs=threads, backend="loky")(delayed(_task)(t) for t in tasks)
    return [_task(t) for t in tasks]


def _task(t):
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        cid, rep, seed, args = t
        rows = run_rep(*args[:1], seed, *args[1:])
        for r in rows:
            r.update(config_id=cid, rep=rep, seed=seed)
        return rows


def run_mc(
    config: DgpConfig,
    n_reps: int,
    kinds=("main",),
    outcomes=("g8",),
    params="desk",
    master_seed: int | None = None,
    threads: int = 1,
    selection: SelectionConfig = SelectionConfig(),
    rule: str = "mean",
) -> McStudy:
    if n_reps < 2:
        raise ConfigInvalid("n_reps must be at least 2")
    master = config.seed if master_seed is None else master_seed
    seeds = rep_seeds(master, n_reps)
    tasks = [(0, r, s, (config, tuple(kinds), tuple(outcomes), params, selection, rule)) for r, s in enumerate(seeds)]
    rows = [row for chunk in _run_many(tasks, threads) for row in chunk]
    return McStudy(config, n_reps, tuple(kinds), _frame(rows), master)


def _frame(rows) -> pd.DataFrame:
    df = pd.DataFrame(rows)
    errors = df.loc[df["error"] != ""] if "error" in df else df.iloc[:0]
    if len(errors):
        warnings.warn(f"{len(errors)} fit(s) failed inside the Monte Carlo run")
    df = df.loc[df["error"] == ""].drop(columns="error")
    cols = ["config_id", "rep", "seed", "kind", "outcome", "coef"]
    rest = [c for c in df.columns if c not in cols]
    return df[cols + rest].sort_values(cols[:2] + cols[3:]).reset_index(drop=True)


BIAS_KINDS = ("mw", "dmw", "main")


def bias_demo(config_grid, n_reps: int = 100, params="desk", master_seed: int = 0, threads: int = 1) -> McStudy:
    """MW, DMW and Main on each config; future outcome for bias, grade 2 for the placebo."""
    grid = list(config_grid)
    spreads = [c.ability_class_var_spread for c in grid]
    if not (any(s == 0 for s in spreads) and any(s > 0 for s in spreads)):
        warnings.warn("the grid should hold one config without and one with variance heterogeneity")
    tasks = []
    for cid, cfg in enumerate(grid):
        for r, s in enumerate(rep_seeds(master_seed + cid, n_reps)):
            tasks.append((cid, r, s, (cfg, BIAS_KINDS, ("g8", "g2"), params, SelectionConfig(), "mean")))
    rows = [row for chunk in _run_many(tasks, threads) for row in chunk]
    return McStudy(grid, n_reps, BIAS_KINDS, _frame(rows), master_seed)


def placebo_pass_rate(study: McStudy, kind: str, config_id: int = 0, alpha: float = 0.05) -> float:
    """Share of reps in which every rank coefficient on grade 2 is insignificant."""
    r = study.records
    r = r.loc[(r["kind"] == kind) & (r["outcome"] == "g2") & (r["config_id"] == config_id)]
    r = r.loc[r["coef"].isin(["R_visible", "R_invisible"])]
    ok = r.groupby("rep")["pvalue"].min() >= alpha
    return float(ok.mean())
