"""Time one Main-spec fit on a large simulated cohort.

    python3 scripts/bench_main_fit.py [--n-schools 2250] [--seed 0]

Prints cohort size, stacked rows and the fit's wall time.
"""

import argparse
import time

from threadpoolctl import threadpool_limits

from rankfx.datamodel import apply_selection
from rankfx.ranking import rank_all
from rankfx.simulate import DgpConfig, gen_cohort
from rankfx.specs import build_and_fit, build_design, desk_params, fit_design


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-schools", type=int, default=2250)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--method", default="cg")
    args = ap.parse_args()
    t0 = time.perf_counter()
    panel, _ = gen_cohort(DgpConfig(seed=args.seed, n_schools=args.n_schools))
    panel = rank_all(apply_selection(panel))
    t1 = time.perf_counter()
    n_classes = int((panel.rosters["grade_level"] == 5).sum())
    params = desk_params(n_classes, method=args.method)
    design = build_design(panel, "main", "g8", None, params)
    t2 = time.perf_counter()
    fit = fit_design(design, params)
    t3 = time.perf_counter()
    print(f"students={design.frame['student_id'].nunique()} rows={fit.n_obs} classes={n_classes}")
    print(f"simulate+rank {t1 - t0:.1f}s  design {t2 - t1:.1f}s  fit {t3 - t2:.1f}s  sweeps={fit.sweeps_used}")
    for name in fit.names:
        print(f"{name}: {fit.params[name]:.3f} ({fit.se[name]:.3f})")


if __name__ == "__main__":
    with threadpool_limits(1):
        main()
