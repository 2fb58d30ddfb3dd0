"""Within-class ordinal and percentile ranks.

Ranks are computed over the observed members of a class only.  Missing
students are assumed to sit at the bottom of the class, so they never
displace an observed student; they only enter through the actual class
size ``N_c`` in ``R = (N_c - n) / (N_c - 1)``.

Two routes are provided: scalar helpers working on one class at a time
(:func:`ordinal_rank`, :func:`percentile_rank`, :func:`ventiles`) and the
vectorised :func:`rank_cells` used on whole panels.  Tests check that the
two agree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import EmptyScores, SingletonClass

RULES = ("mean", "min", "max")
SOURCES = ("visible", "invisible")
N_VENTILES = 20

_PANDAS_METHOD = {"mean": "average", "min": "min", "max": "max"}


@dataclass(frozen=True)
class RankAssignment:
    student_id: object
    ordinal: float
    percentile_rank: float
    tie_group_size: int
    actual_size: int
    rule: str
    class_id: object = None
    subject: str | None = None
    source: str | None = None


@dataclass(frozen=True)
class VentileAssignment:
    student_id: object
    ventile: int
    is_top: bool
    is_bottom: bool
    class_id: object = None
    subject: str | None = None
    source: str | None = None


def _check_rule(rule):
    if rule not in RULES:
        raise ValueError(f"unknown tie rule {rule!r}; expected one of {RULES}")


def ordinal_rank(scores: Sequence[tuple], actual_size: int, rule: str = "mean"):
    """Ordinal positions (1 = best) for the observed members of one class.

    ``scores`` holds ``(student_id, score)`` pairs.  Returns a list of
    ``(student_id, ordinal, tie_group_size)`` in input order.
    """
    _check_rule(rule)
    if actual_size < 2:
        raise SingletonClass(f"class size {actual_size} < 2")
    if len(scores) == 0:
        raise EmptyScores("no observed scores")
    if len(scores) > actual_size:
        raise ValueError(f"{len(scores)} observed scores exceed class size {actual_size}")

    values = [s for _, s in scores]
    out = []
    for sid, s in scores:
        higher = sum(v > s for v in values)
        tied = sum(v == s for v in values)
        first, last = higher + 1, higher + tied
        if rule == "mean":
            n = (first + last) / 2
        elif rule == "min":
            n = float(first)
        else:
            n = float(last)
        out.append((sid, n, tied))
    return out


def percentile_rank(ordinals: Iterable[tuple], actual_size: int, rule: str = "mean"):
    """Map ``(student_id, ordinal, tie_group_size)`` triples to :class:`RankAssignment`."""
    if actual_size < 2:
        raise SingletonClass(f"class size {actual_size} < 2")
    out = []
    for sid, n, k in ordinals:
        r = (actual_size - n) / (actual_size - 1)
        out.append(RankAssignment(sid, float(n), r, int(k), int(actual_size), rule))
    return out


def ventile_index(ordinal, actual_size):
    """Ventile 1..20 of ``R = (N - n)/(N - 1)`` using exact integer arithmetic.

    ``ordinal`` may be half-integer (mean rule), so everything is doubled
    before flooring to avoid binary rounding at bin edges.
    """
    n2 = np.rint(2 * np.asarray(ordinal, dtype=float)).astype(np.int64)
    size = np.asarray(actual_size, dtype=np.int64)
    num = N_VENTILES * (2 * size - n2)
    den = 2 * (size - 1)
    return np.minimum(N_VENTILES, num // den + 1)


def ventiles(assignments: Iterable[RankAssignment]):
    out = []
    for a in assignments:
        v = int(ventile_index(a.ordinal, a.actual_size))
        out.append(
            VentileAssignment(
                a.student_id,
                v,
                is_top=a.percentile_rank == 1.0,
                is_bottom=a.percentile_rank == 0.0,
                class_id=a.class_id,
                subject=a.subject,
                source=a.source,
            )
        )
    return out


def rank_frame(frame: pd.DataFrame, score: str, size: str, by: Sequence[str], rule: str = "mean"):
    """Vectorised ranks for every group in ``by``.

    ``frame`` must contain observed rows only.  Returns a DataFrame aligned
    with ``frame`` holding ``ordinal``, ``tie_group_size`` and ``R``.
    """
    _check_rule(rule)
    by = list(by)
    if frame.empty:
        raise EmptyScores("no observed scores")
    sizes = frame[size].to_numpy()
    if (sizes < 2).any():
        raise SingletonClass("class with actual size < 2 present")
    grouped = frame.groupby(by, sort=False)[score]
    ordinal = grouped.rank(method=_PANDAS_METHOD[rule], ascending=False)
    tie = frame.groupby(by + [score], sort=False)[score].transform("size")
    n_obs = grouped.transform("size")
    if (n_obs.to_numpy() > sizes).any():
        raise ValueError("observed members exceed actual class size")
    r = (sizes - ordinal.to_numpy()) / (sizes - 1)
    return pd.DataFrame(
        {"ordinal": ordinal.to_numpy(), "tie_group_size": tie.to_numpy().astype(np.int64), "R": r},
        index=frame.index,
    )


def rank_sum_check(ordinals):
    """Sum of ordinals; equals N(N+1)/2 under the mean rule on a fully observed class."""
    return float(sum(n for _, n, _ in ordinals))


def rank_cells(panel, source: str = "visible", rule: str = "mean", pivot_grade: int = 5, score_column=None):
    """Append ``R_<source>``, ``ord_<source>`` and ``ties_<source>`` to the pivot-grade cells.

    The invisible rank uses the raw grade-5 test score: percentiles are a
    monotone transform of it, but the 100-bin rounding would create ties
    that are not in the data.
    """
    _check_rule(rule)
    if source not in SOURCES:
        raise ValueError(f"unknown rank source {source!r}")
    col = score_column or ("class_grade" if source == "visible" else "test_score_raw")
    cells = panel.cells.copy()
    sizes = panel.rosters.set_index("class_id")["actual_size"]
    mask = (cells["grade_level"] == pivot_grade) & cells["observed"] & cells[col].notna()
    sub = cells.loc[mask, ["class_id", "subject", col]].copy()
    sub["_size"] = sizes.reindex(sub["class_id"]).to_numpy()
    ranks = rank_frame(sub, col, "_size", ["class_id", "subject"], rule)
    for name, values in (("R", ranks["R"]), ("ord", ranks["ordinal"]), ("ties", ranks["tie_group_size"])):
        key = f"{name}_{source}"
        cells[key] = np.nan
        cells.loc[mask, key] = values.to_numpy(dtype=float)
    meta = dict(panel.meta)
    meta["ranks"] = {**meta.get("ranks", {}), source: {"rule": rule, "pivot_grade": pivot_grade}}
    return panel.replace(cells=cells, meta=meta)


def rank_all(panel, rule: str = "mean", pivot_grade: int = 5):
    for source in SOURCES:
        panel = rank_cells(panel, source, rule, pivot_grade)
    return panel
