import numpy as np
import pandas as pd
import pytest

from rankfx.datamodel import apply_selection, convert_all
from rankfx.errors import ConfigInvalid, FeNotRecovered, MissingRanks, TooFewClasses
from rankfx.ranking import rank_all, rank_cells
from rankfx.simulate import DgpConfig, gen_cohort
from rankfx.specs import (
    SpecKind,
    SpecParams,
    build_and_fit,
    build_design,
    class_moment_groups,
    class_value_added,
    default_cluster,
    desk_params,
    moments,
    quantile_bins,
    tie_augmented_fit,
    value_added_fit,
)

ALL_KINDS = [k.value for k in SpecKind]


def test_quantile_bins_partition():
    rng = np.random.default_rng(0)
    v = rng.permutation(216).astype(float)
    b = quantile_bins(v, 6)
    counts = np.bincount(b)[1:]
    assert len(counts) == 6 and counts.max() - counts.min() <= 1
    # monotone in the value
    assert (np.diff(b[np.argsort(v)]) >= 0).all()


def test_quantile_bins_ties_share_a_bin():
    v = np.array([1.0, 2.0, 2.0, 3.0, 4.0, 5.0])
    b = quantile_bins(v, 3, keys=np.array(list("fedcba")))
    assert b[1] == b[2]
    with pytest.raises(TooFewClasses):
        quantile_bins([1.0, 2.0], 3)


def test_kurtosis_two_point():
    assert moments([-1, 1]) == (0.0, 1.0, 1.0)
    assert moments([3, 3, 3])[2] == 0.0


def test_moment_groups(ranked_panel, small_params):
    groups = class_moment_groups(ranked_panel, small_params)
    t = groups.table
    for subj, g in t.groupby(level="subject"):
        for col, n in (("d", small_params.d_bins), ("g", small_params.g_bins)):
            assert set(g[col]) <= set(range(1, n + 1))
        assert g["D"].max() <= 216
    assert (t["n"] >= 2).all()


def test_paper_counts_need_many_classes(ranked_panel):
    n = int((ranked_panel.rosters["grade_level"] == 5).sum())
    with pytest.raises(TooFewClasses):
        class_moment_groups(ranked_panel, SpecParams(g_bins=n + 1))


def test_desk_params():
    p = desk_params(1337)
    assert (p.d_bins, p.g_bins, p.e_bins) == (25, 50, (8, 23))
    assert desk_params(1337, method="map").method == "map"


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_every_kind_builds_with_audit(ranked_panel, small_params, kind):
    d = build_design(ranked_panel, kind, "g8", None, small_params)
    audit = d.audit_table()
    # each symbol appears once
    assert not audit["symbol"].duplicated().any()
    for col in d.focal + d.controls:
        assert col in set(audit["column"])
    if kind != "motivation":
        per = d.frame.groupby("student_id").size()
        assert (per == 2).all()
    else:
        assert "student" not in d.fe_dims
        assert d.labels["cluster"] == "school_g10"


def test_simple_nests_mw(ranked_panel, small_params):
    mw = build_design(ranked_panel, "mw", "g8", None, small_params)
    simple = build_design(ranked_panel, "simple", "g8", None, small_params.replace(demographics=True))
    assert set(mw.fe_dims) < set(simple.fe_dims)
    assert set(simple.fe_dims) - set(mw.fe_dims) == {"C_fe"}
    assert set(simple.focal) - set(mw.focal) == {"R_visible"}
    assert mw.controls == simple.controls


def test_ventile_endpoints_suppressed(ranked_panel, small_params):
    d = build_design(ranked_panel, "ventiles", "g8", None, small_params)
    f = d.frame
    for source in ("visible", "invisible"):
        vcols = [c for c in d.focal if c.startswith("v") and c.endswith("_" + source)]
        on_end = (f[f"top_{source}"] + f[f"bot_{source}"]) > 0
        assert (f.loc[on_end, vcols].sum(axis=1) == 0).all()
        assert f"v10_{source}" not in d.focal
        # non-endpoint rows outside the reference ventile carry exactly one dummy
        assert (f.loc[~on_end, vcols].sum(axis=1) <= 1).all()


def test_class_size_range(ranked_panel, small_params):
    d = build_design(ranked_panel, "classsize", "g8", None, small_params)
    assert d.frame["actual_size"].between(5, 26).all()
    assert all(5 <= int(c[-2:]) <= 26 for c in d.focal)


def test_peer_quality_reference(ranked_panel, small_params):
    d = build_design(ranked_panel, "peerquality", "g8", None, small_params)
    assert "R_visible_x_q10" not in d.focal and "R_invisible_x_q10" in d.focal
    own = build_design(ranked_panel, "peerquality", "g8", None, small_params.replace(peer_mode="own"))
    assert own.frame["pq_bin"].between(1, 20).all()


def test_missing_ranks(small_cohort, small_params):
    panel = apply_selection(small_cohort[0])
    with pytest.raises(MissingRanks):
        build_design(panel, "main", "g8", None, small_params)
    only_v = rank_cells(panel, "visible")
    with pytest.raises(MissingRanks):
        build_design(only_v, "main", "g8", None, small_params)


def test_unknown_selectors(ranked_panel, small_params):
    with pytest.raises(ConfigInvalid):
        SpecKind.parse("nope")
    with pytest.raises(ConfigInvalid):
        build_design(ranked_panel, "main", "no_such_outcome", None, small_params)
    with pytest.raises(ConfigInvalid):
        build_design(ranked_panel, "main", "g8", "no_such_cluster", small_params)


def test_default_clusters():
    assert default_cluster(SpecKind.MAIN, "g8") == "school_g8"
    assert default_cluster(SpecKind.MAIN, "g10") == "school_g10"
    assert default_cluster(SpecKind.MAIN, "g2") == "school_g5"
    assert default_cluster(SpecKind.MAIN, "motivation") == "class_g5"
    assert default_cluster(SpecKind.MOTIVATION, "motivation") == "school_g10"


def test_exact_linear_recovery(ranked_panel, small_params):
    # outcome = R^V + class-by-subject constant, no noise
    d = build_design(ranked_panel, "uncond", "g8", None, small_params)
    f = d.frame
    f["y"] = f["R_visible"] + f["cs"] % 7
    from rankfx.specs import fit_design

    res = fit_design(d, small_params.replace(tolerance=1e-12))
    assert res.params["R_visible"] == pytest.approx(1.0, abs=1e-8)
    assert res.params["R_invisible"] == pytest.approx(0.0, abs=1e-8)


def test_pure_class_shift_is_absorbed(ranked_panel, small_params):
    d = build_design(ranked_panel, "uncond", "g8", None, small_params)
    d.frame["y"] = (d.frame["cs"] * 13) % 5 + 40.0
    from rankfx.specs import fit_design

    res = fit_design(d, small_params)
    assert res.meta["outcome_absorbed"]
    assert np.allclose(res.params.to_numpy(), 0.0, atol=1e-8)


def test_scale_invariance(small_cohort, small_params):
    panel, _ = small_cohort
    cells = panel.cells.copy()
    g5 = cells["grade_level"] == 5
    cells.loc[g5, "test_score_raw"] *= 3.7
    cells.loc[g5, "test_score_pctl"] = np.nan
    scaled = convert_all(panel.replace(cells=cells), grades=[5])
    a = rank_all(apply_selection(panel))
    b = rank_all(apply_selection(scaled))
    for kind in ("mw", "dmw", "main"):
        fa = build_and_fit(a, kind, "g8", None, small_params)
        fb = build_and_fit(b, kind, "g8", None, small_params)
        np.testing.assert_allclose(fa.params.to_numpy(), fb.params.to_numpy(), rtol=1e-8, atol=1e-8)


def test_tie_free_augmentation_is_degenerate(small_params):
    panel, _ = gen_cohort(DgpConfig(seed=21, n_schools=60, grade_step=0.0, grade_mean=5.5))
    panel = rank_all(apply_selection(panel))
    assert (panel.cells["ties_visible"].dropna() == 1).all()
    main = build_and_fit(panel, "main", "g8", None, small_params)
    aug = tie_augmented_fit(panel, "min", "g8", None, small_params)
    assert aug.names == ["R_visible", "R_invisible"]
    np.testing.assert_allclose(aug.params.to_numpy(), main.params.to_numpy(), rtol=1e-7)


def test_main_recovers_beta():
    panel, _ = gen_cohort(DgpConfig(seed=31, n_schools=450))
    panel = rank_all(apply_selection(panel))
    params = desk_params(int((panel.rosters["grade_level"] == 5).sum()))
    fit = build_and_fit(panel, "main", "g8", None, params)
    assert abs(fit.params["R_visible"] - 8) < 2 * fit.se["R_visible"]
    assert abs(fit.params["R_invisible"]) < 2 * fit.se["R_invisible"]
    assert fit.meta["cluster"] == "school_g8"


def test_value_added_dispersion():
    cfg = DgpConfig(seed=41, n_schools=700)
    panel, truth = gen_cohort(cfg)
    panel = rank_all(apply_selection(panel))
    n = int((panel.rosters["grade_level"] == 5).sum())
    va_fit = value_added_fit(panel, "g8", None, desk_params(n))
    va = class_value_added(va_fit, panel)
    assert n >= 2000
    assert va.identified
    assert abs(va.sd_corrected - cfg.class_va_sd) < 0.15 * cfg.class_va_sd
    assert va.values.mean() == pytest.approx(0.0, abs=1e-9)
    assert "class_quality" in va.one_sd_effects and "R_visible" in va.one_sd_effects


def test_value_added_no_signal(small_params):
    # no class heterogeneity of any kind
    cfg = DgpConfig(seed=42, n_schools=60, class_va_sd=0.0, ability_class_mean_sd=0.0, leniency_sd=0.0)
    panel, _ = gen_cohort(cfg)
    panel = rank_all(apply_selection(panel))
    va = class_value_added(value_added_fit(panel, "g8", None, small_params), panel)
    assert va.sd_corrected < 0.3 * va.sd


def test_value_added_requires_recovery(ranked_panel, small_params):
    fit = build_and_fit(ranked_panel, "main", "g8", None, small_params)
    with pytest.raises(FeNotRecovered):
        class_value_added(fit, ranked_panel)
    with_student = build_and_fit(ranked_panel, "main", "g8", None, small_params.replace(recover_fe=True))
    assert not class_value_added(with_student, ranked_panel).identified
