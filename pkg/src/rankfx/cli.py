"""Command-line entry point: ``rankfx <subcommand> [flags]``.

Settings resolve as built-in defaults, then a flat JSON ``--config`` file,
then explicit flags.  Every run writes the resolved settings to
``run_config.json`` next to its outputs.  ``--threads`` only sets the
number of worker processes; BLAS stays single-threaded so results do not
depend on it.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__
from .datamodel import SelectionConfig, apply_selection, convert_all, load_panel, write_panel, write_selection_log
from .errors import ConfigInvalid, RankfxError
from .ranking import RULES, SOURCES, rank_cells

SPECS = ("main", "mw", "dmw", "uncond", "simple", "ventiles", "classsize", "peerquality", "motivation", "tieaug")
COMMANDS = ("simulate", "select", "rank", "fit", "placebo", "balance", "mc", "report", "pipeline")
DGP_ALIASES = {"beta_visible": ["--beta"], "delta_invisible": ["--delta"]}


# ---------------------------------------------------------------- parser


def _dgp_fields():
    from .simulate import DgpConfig

    return dataclasses.fields(DgpConfig)


def _add_dgp_flags(p):
    g = p.add_argument_group("data-generating process")
    for f in _dgp_fields():
        flags = ["--" + f.name.replace("_", "-")] + DGP_ALIASES.get(f.name, [])
        if f.type in ("bool",) or isinstance(f.default, bool):
            g.add_argument(*flags, dest=f"dgp_{f.name}", type=_parse_bool, default=None, metavar="BOOL")
        elif isinstance(f.default, tuple):
            g.add_argument(*flags, dest=f"dgp_{f.name}", type=_parse_tuple, default=None, metavar="A,B")
        else:
            g.add_argument(*flags, dest=f"dgp_{f.name}", type=type(f.default), default=None)


def _parse_bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "y"):
        return True
    if v in ("0", "false", "no", "n"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _parse_tuple(s):
    out = []
    for part in str(s).split(","):
        part = part.strip()
        try:
            out.append(int(part))
        except ValueError:
            out.append(float(part))
    return tuple(out)


def _add_selection_flags(p):
    p.add_argument("--coverage-threshold", type=float, default=None)
    p.add_argument("--cheating-threshold", type=float, default=None)
    p.add_argument("--required-grades", type=_parse_tuple, default=None)


def _add_fit_flags(p, multi=False):
    if multi:
        p.add_argument("--spec", default=None, help="comma-separated list of " + "|".join(SPECS))
    else:
        p.add_argument("--spec", choices=SPECS, default=None)
    p.add_argument("--outcome", default=None, help="g8|g10|g2|<column>")
    p.add_argument("--cluster", default=None, help="school_g8|school_g10|class_g5|<column>")
    p.add_argument("--rule", choices=RULES, default=None)
    p.add_argument("--groups", choices=("auto", "paper", "desk"), default=None)
    p.add_argument("--method", choices=("cg", "map"), default=None)
    p.add_argument("--tolerance", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rankfx", description="Two-rank class-rank-effect toolkit.")
    parser.add_argument("--version", action="version", version=f"rankfx {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="flat JSON file with settings")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--threads", type=int, default=None, help="worker processes (env RANKFX_THREADS)")
    common.add_argument("--pivot-grade", type=int, default=None)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic cohort")
    _add_dgp_flags(p)

    for name, helptext in (("select", "apply sample selection"), ("rank", "append rank columns")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--in", dest="input", default=None)
        if name == "select":
            _add_selection_flags(p)
        else:
            p.add_argument("--source", choices=SOURCES + ("both",), default=None)
            p.add_argument("--rule", choices=RULES, default=None)

    for name, helptext in (("fit", "fit one or more specifications"), ("placebo", "grade-2 ability placebo"), ("balance", "balance checks")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--in", dest="input", default=None)
        _add_fit_flags(p, multi=name == "fit")

    p = sub.add_parser("mc", parents=[common], help="Monte Carlo study")
    _add_dgp_flags(p)
    _add_fit_flags(p, multi=True)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--master-seed", type=int, default=None)
    p.add_argument("--bias-demo", action="store_true", default=None)

    p = sub.add_parser("report", parents=[common], help="collect fit outputs into one table")
    p.add_argument("--in", dest="input", default=None, help="directory holding *_coefs.csv files")

    p = sub.add_parser("pipeline", parents=[common], help="simulate or load, select, rank, fit, check, report")
    p.add_argument("--simulate", action="store_true", default=None)
    p.add_argument("--in", dest="input", default=None)
    _add_dgp_flags(p)
    _add_selection_flags(p)
    _add_fit_flags(p, multi=True)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--master-seed", type=int, default=None)
    return parser


# ---------------------------------------------------------------- resolution

DEFAULTS = {
    "out": "rankfx_out",
    "pivot_grade": 5,
    "source": "both",
    "rule": "mean",
    "spec": None,  # per command: balance uses dmw, everything else main
    "outcome": "g8",
    "cluster": None,
    "groups": "auto",
    "method": "cg",
    "tolerance": 1e-8,
    "reps": 1,
    "master_seed": None,
    "coverage_threshold": 0.90,
    "cheating_threshold": 0.50,
    "required_grades": (),
    "simulate": False,
    "input": None,
    "bias_demo": False,
}
# execution-only settings: never read from the config file's DGP block
_EXECUTION = {"threads", "config", "command"}
# left out of run_config.json so two runs that differ only here match byte for byte
_UNRECORDED = {"out"}


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags."""
    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigInvalid("the config file must hold one flat JSON object")
    dgp_names = {f.name for f in _dgp_fields()}
    cfg = dict(DEFAULTS)
    dgp = {}
    for k, v in file_cfg.items():
        if k in dgp_names:
            dgp[k] = v
        elif k in DEFAULTS:
            cfg[k] = v
        elif k not in _EXECUTION:
            raise ConfigInvalid(f"unknown config key {k!r}")
    for k, v in vars(args).items():
        if v is None or k in _EXECUTION:
            continue
        if k.startswith("dgp_"):
            dgp[k[4:]] = v
        else:
            cfg[k] = v
    cfg = {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}
    cfg["dgp"] = {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(dgp.items())}
    cfg["command"] = args.command
    return cfg


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("RANKFX_THREADS")
    return max(1, int(env)) if env else 1


def _write_run_config(cfg: dict, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    rec = {k: v for k, v in cfg.items() if k not in _UNRECORDED}
    (out / "run_config.json").write_text(json.dumps({"version": __version__, **rec}, indent=2, sort_keys=True) + "\n")


def _dgp(cfg):
    from .simulate import DgpConfig

    d = DgpConfig.from_dict(cfg.get("dgp", {}))
    d.validate()
    return d


def _config_hash(cfg) -> str:
    rec = {k: v for k, v in cfg.items() if k not in _UNRECORDED | {"groups_resolved"}}
    return hashlib.sha256(json.dumps(rec, sort_keys=True).encode()).hexdigest()[:16]


def _summary(cfg) -> dict:
    return {"seed": _seed(cfg), "config_hash": _config_hash(cfg)}


def _seed(cfg):
    from .simulate import DgpConfig

    return cfg.get("dgp", {}).get("seed", DgpConfig.seed)


def _selection(cfg) -> SelectionConfig:
    return SelectionConfig(
        pivot_grade=cfg["pivot_grade"],
        coverage_threshold=cfg["coverage_threshold"],
        cheating_threshold=cfg["cheating_threshold"],
        required_grades=tuple(cfg["required_grades"] or ()),
    )


def _params(cfg, panel):
    from .specs import SpecParams, desk_params

    n = int((panel.rosters["grade_level"] == cfg["pivot_grade"]).sum())
    base = SpecParams(method=cfg["method"], tolerance=cfg["tolerance"])
    mode = cfg["groups"]
    # auto: published counts only when about seven classes fill each finest cell
    if mode == "paper" or (mode == "auto" and n >= 7 * base.e_bins[0] * base.e_bins[1]):
        p, resolved = base, "paper"
    else:
        p, resolved = desk_params(n, method=cfg["method"], tolerance=cfg["tolerance"]), "desk"
    cfg["groups_resolved"] = {"mode": resolved, "d_bins": p.d_bins, "g_bins": p.g_bins, "e_bins": list(p.e_bins)}
    return p


def _load(cfg):
    if not cfg.get("input"):
        raise ConfigInvalid("--in is required")
    return load_panel(cfg["input"])


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg, threads):
    from .simulate import gen_cohort, write_truth

    out = Path(cfg["out"])
    panel, truth = gen_cohort(_dgp(cfg))
    write_panel(panel, out / "panel.csv")
    write_truth(truth, out)
    _write_run_config(cfg, out)
    return panel


def cmd_select(cfg, threads, panel=None):
    out = Path(cfg["out"])
    panel = panel if panel is not None else _load(cfg)
    c = panel.cells
    if (c["observed"] & c["test_score_raw"].notna() & c["test_score_pctl"].isna()).any():
        panel = convert_all(panel)
    panel = apply_selection(panel, _selection(cfg))
    write_panel(panel, out / "panel_selected.csv")
    write_selection_log(panel, out / "selection_log.jsonl")
    _write_run_config(cfg, out)
    return panel


def cmd_rank(cfg, threads, panel=None):
    out = Path(cfg["out"])
    panel = panel if panel is not None else _load(cfg)
    sources = SOURCES if cfg["source"] == "both" else (cfg["source"],)
    for s in sources:
        panel = rank_cells(panel, s, cfg["rule"], cfg["pivot_grade"])
    write_panel(panel, out / "panel_ranked.csv")
    _write_run_config(cfg, out)
    return panel


def _fit_one(panel, cfg, spec):
    from .specs import build_and_fit, tie_augmented_fit

    params = _params(cfg, panel)
    if spec == "tieaug":
        return tie_augmented_fit(panel, cfg["rule"], cfg["outcome"], cfg["cluster"], params)
    return build_and_fit(panel, spec, cfg["outcome"], cfg["cluster"], params)


def _specs(cfg):
    specs = [s.strip() for s in str(cfg["spec"] or "main").split(",") if s.strip()]
    bad = [s for s in specs if s not in SPECS]
    if bad:
        raise ConfigInvalid(f"unknown spec(s): {', '.join(bad)}")
    return specs


def cmd_fit(cfg, threads, panel=None):
    from .report import emit_report

    out = Path(cfg["out"])
    panel = panel if panel is not None else _load(cfg)
    results = {f"fit_{s}_{cfg['outcome']}": _fit_one(panel, cfg, s) for s in _specs(cfg)}
    emit_report(results, out, summary_extra=_summary(cfg))
    _write_run_config(cfg, out)
    return results


def cmd_check(cfg, threads, which, panel=None):
    from .analysis import ability_placebo, balance_check
    from .report import emit_report

    out = Path(cfg["out"])
    panel = panel if panel is not None else _load(cfg)
    params = _params(cfg, panel)
    spec = cfg["spec"] or ("main" if which == "placebo" else "dmw")
    if which == "placebo":
        rep = ability_placebo(panel, spec, params, cfg["cluster"])
    else:
        rep = balance_check(panel, spec, params, cfg["cluster"] or "class_g5")
    emit_report({f"{which}_{spec}": rep}, out, summary_extra=_summary(cfg))
    _write_run_config(cfg, out)
    return rep


def cmd_mc(cfg, threads):
    from .montecarlo import bias_demo, run_mc
    from .report import emit_report

    out = Path(cfg["out"])
    dgp = _dgp(cfg)
    reps = max(2, int(cfg["reps"]))
    master = cfg["master_seed"] if cfg["master_seed"] is not None else dgp.seed
    if cfg["bias_demo"]:
        grid = [
            dgp.replace(ability_class_var_spread=0.0, outcome_ability_map="linear"),
            dgp.replace(ability_class_var_spread=max(dgp.ability_class_var_spread, 0.5), outcome_ability_map="convex"),
        ]
        study = bias_demo(grid, reps, master_seed=master, threads=threads)
        name = "bias_demo"
    else:
        outcomes = [o.strip() for o in str(cfg["outcome"]).split(",")]
        study = run_mc(dgp, reps, _specs(cfg), outcomes, master_seed=master, threads=threads, rule=cfg["rule"])
        name = "mc"
    emit_report({name: study}, out, summary_extra={**_summary(cfg), "seed": master, "dgp_hash": study.config_hash()})
    _write_run_config(cfg, out)
    return study


def cmd_report(cfg, threads):
    import pandas as pd

    from .report import FLOAT, stars

    src = Path(cfg["input"] or cfg["out"])
    files = sorted(src.glob("*_coefs.csv"))
    if not files:
        from .errors import IoFailure

        raise IoFailure(f"no *_coefs.csv files under {src}")
    rows = []
    for f in files:
        df = pd.read_csv(f)
        name = f.name[: -len("_coefs.csv")]
        for r in df.itertuples(index=False):
            rows.append(
                {
                    "result": name,
                    "coef": r.coef,
                    "estimate": f"{r.estimate:.3f}{stars(r.pvalue)}",
                    "se": f"({r.se:.3f})",
                    "n_obs": r.n_obs,
                    "n_clusters": r.n_clusters,
                }
            )
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(out / "tables.csv", index=False, float_format=FLOAT, lineterminator="\n")
    _write_run_config(cfg, out)


def cmd_pipeline(cfg, threads):
    out = Path(cfg["out"])
    if cfg["simulate"] == bool(cfg["input"]):
        raise ConfigInvalid("pipeline needs exactly one of --simulate or --in")
    if int(cfg["reps"]) > 1:
        if not cfg["simulate"]:
            raise ConfigInvalid("--reps > 1 needs --simulate")
        cmd_mc(cfg, threads)
        return
    if cfg["simulate"]:
        panel = cmd_simulate(cfg, threads)
    else:
        panel = _load(cfg)
    panel = cmd_select(cfg, threads, panel)
    panel = cmd_rank(cfg, threads, panel)
    cmd_fit(cfg, threads, panel)
    c = panel.cells
    if ((c["grade_level"] == 2) & c["observed"]).any():
        cmd_check(dict(cfg, spec="main"), threads, "placebo", panel)
    cmd_report(dict(cfg, input=str(out)), threads)
    _write_run_config(cfg, out)


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        threads = _threads(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(1):
            if args.command == "simulate":
                cmd_simulate(cfg, threads)
            elif args.command == "select":
                cmd_select(cfg, threads)
            elif args.command == "rank":
                cmd_rank(cfg, threads)
            elif args.command == "fit":
                cmd_fit(cfg, threads)
            elif args.command in ("placebo", "balance"):
                cmd_check(cfg, threads, args.command)
            elif args.command == "mc":
                cmd_mc(cfg, threads)
            elif args.command == "report":
                cmd_report(cfg, threads)
            else:
                cmd_pipeline(cfg, threads)
    except (RankfxError, OSError, ValueError) as exc:
        print(f"rankfx {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None):
    sys.exit(run(argv))
