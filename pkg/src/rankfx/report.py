"""Table and plot-data emission.

Tables put the standard error in parentheses under each estimate, with
stars at the 1/5/10% levels.  Fits with per-bin coefficients (ventiles,
class size, peer quality) also get plot-data files with a 95% interval per
bin.  Everything is written to a staging directory first and moved into
place only when every file succeeded.
"""

from __future__ import annotations

import json
import os
import re
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from .analysis import CheckReport
from .errors import IoFailure
from .hdfe import FitResult
from .montecarlo import McStudy

FLOAT = "%.10g"


def stars(p: float) -> str:
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.1:
        return "*"
    return ""


def fit_table(fit: FitResult, coefs=None, digits: int = 3) -> pd.DataFrame:
    """Two lines per coefficient: estimate with stars, then (se)."""
    coefs = list(coefs or fit.names)
    rows = []
    for c in coefs:
        b, s, p = float(fit.params[c]), float(fit.se[c]), fit.pvalue(c)
        rows.append({"term": c, "value": f"{b:.{digits}f}{stars(p)}"})
        rows.append({"term": "", "value": f"({s:.{digits}f})"})
    rows.append({"term": "Observations", "value": str(fit.n_obs)})
    rows.append({"term": "Clusters", "value": str(fit.n_clusters)})
    return pd.DataFrame(rows)


def fit_numbers(fit: FitResult) -> pd.DataFrame:
    rows = []
    for c in fit.names:
        lo, hi = fit.conf_int(c)
        p = fit.pvalue(c)
        rows.append(
            {
                "coef": c,
                "estimate": float(fit.params[c]),
                "se": float(fit.se[c]),
                "pvalue": p,
                "stars": stars(p),
                "ci_low": lo,
                "ci_high": hi,
                "n_obs": fit.n_obs,
                "n_clusters": fit.n_clusters,
            }
        )
    return pd.DataFrame(rows)


_BIN = {
    "ventiles": re.compile(r"^v(\d+)_(visible|invisible)$"),
    "classsize": re.compile(r"^R_(visible|invisible)_x_size(\d+)$"),
    "peerquality": re.compile(r"^R_(visible|invisible)_x_q(\d+)$"),
}


def plot_data(fit: FitResult) -> dict[str, pd.DataFrame]:
    """Per-source bin tables for ventile, class-size and peer-quality fits."""
    spec = fit.meta.get("spec")
    if spec not in _BIN:
        return {}
    pat = _BIN[spec]
    out: dict[str, list] = {"visible": [], "invisible": []}
    for c in fit.names:
        m = pat.match(c)
        if not m:
            continue
        a, b = m.groups()
        source, k = (b, int(a)) if spec == "ventiles" else (a, int(b))
        lo, hi = fit.conf_int(c)
        out[source].append({"bin": k, "coef": float(fit.params[c]), "ci_low": lo, "ci_high": hi})
    if spec == "ventiles":
        ref = fit.meta["params"].ventile_ref if "params" in fit.meta else 10
        for source in out:
            # the reference bin is zero by construction
            out[source].append({"bin": ref, "coef": 0.0, "ci_low": 0.0, "ci_high": 0.0})
            for flag, k in (("top", 21), ("bot", 0)):
                name = f"{flag}_{source}"
                if name in fit.names:
                    lo, hi = fit.conf_int(name)
                    out[source].append({"bin": k, "coef": float(fit.params[name]), "ci_low": lo, "ci_high": hi})
    return {s: pd.DataFrame(v).sort_values("bin").reset_index(drop=True) for s, v in out.items() if v}


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def _write_csv(df: pd.DataFrame, path: Path):
    df.to_csv(path, index=False, float_format=FLOAT, lineterminator="\n")


def emit_report(results: dict, out_dir, layout: str = "paper", summary_extra: dict | None = None) -> list[Path]:
    """Write every result under ``out_dir``; returns the written paths (sorted)."""
    if not results:
        raise IoFailure("nothing to report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        stage = Path(tempfile.mkdtemp(prefix=".report-", dir=out))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    verdicts = {}
    written = []
    try:
        for name in sorted(results):
            obj = results[name]
            base = _safe(name)
            if isinstance(obj, FitResult):
                if layout == "paper":
                    _write_csv(fit_table(obj), stage / f"{base}_table.csv")
                _write_csv(fit_numbers(obj), stage / f"{base}_coefs.csv")
                for source, df in plot_data(obj).items():
                    _write_csv(df, stage / f"{base}_plot_{source}.csv")
                if "audit" in obj.meta:
                    _write_csv(obj.meta["audit"], stage / f"{base}_audit.csv")
            elif isinstance(obj, CheckReport):
                _write_csv(obj.table(), stage / f"{base}_check.csv")
                verdicts[name] = obj.verdict
            elif isinstance(obj, McStudy):
                _write_csv(obj.records, stage / f"{base}_reps.csv")
                _write_csv(obj.summary(), stage / f"{base}_summary.csv")
            elif isinstance(obj, pd.DataFrame):
                _write_csv(obj, stage / f"{base}.csv")
            else:
                raise IoFailure(f"cannot report object of type {type(obj).__name__}")
        summary = {"verdicts": verdicts, **(summary_extra or {})}
        (stage / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json) + "\n")
        for f in sorted(stage.iterdir()):
            target = out / f.name
            os.replace(f, target)
            written.append(target)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return sorted(written)


def _json(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return str(o)
