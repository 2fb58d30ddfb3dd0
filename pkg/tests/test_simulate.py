import json

import numpy as np
import pytest

from rankfx.datamodel import apply_selection
from rankfx.errors import ConfigInvalid, NotSimulated
from rankfx.ranking import rank_all
from rankfx.simulate import DgpConfig, gen_cohort, inject_rank_effect, outcome_map, write_truth
from rankfx.specs import build_and_fit


def test_construction(small_cohort, small_config):
    panel, truth = small_cohort
    panel.validate()
    assert panel.provenance == "simulated"
    assert truth.beta_visible == small_config.beta_visible == 8.0
    assert truth.delta_invisible == 0.0
    assert set(panel.cells["grade_level"]) == {2, 5, 8, 10}
    # two subjects per student and grade
    per = panel.cells.groupby(["student_id", "grade_level"]).size()
    assert (per == 2).all()


def test_same_seed_bit_identical(small_config, small_cohort):
    again, _ = gen_cohort(small_config)
    assert again.same_data(small_cohort[0])
    other, _ = gen_cohort(small_config.replace(seed=small_config.seed + 1))
    assert not other.same_data(small_cohort[0])


@pytest.mark.parametrize(
    "change",
    [
        {"teacher_noise_sd": -1.0},
        {"subject_loading": 1.5},
        {"missing_rate": 1.0},
        {"class_size_min": 1},
        {"outcome_ability_map": "cubic"},
    ],
)
def test_invalid_config(change):
    with pytest.raises(ConfigInvalid):
        DgpConfig(**change).validate()


def test_config_dict_roundtrip():
    cfg = DgpConfig(seed=3, classes_per_school=(1, 2))
    assert DgpConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigInvalid):
        DgpConfig.from_dict({"no_such_field": 1})


def test_grade_scale_calibration():
    panel, _ = gen_cohort(DgpConfig(seed=2, n_schools=150))
    g5 = panel.slice(5)
    assert abs(g5["class_grade"].mean() - 8.0) < 0.1
    assert abs(g5["class_grade"].std() - 1.0) < 0.1
    assert g5["class_grade"].between(1, 10).all()
    assert (g5["class_grade"] == g5["class_grade"].round()).all()


def test_rank_correlation_bracket():
    _, truth = gen_cohort(DgpConfig(seed=4, n_schools=200))
    ts = truth.students
    r = np.corrcoef(ts["rank_visible"], ts["rank_invisible"])[0, 1]
    assert 0.5 <= r <= 0.7


def test_no_variance_spread_shares_sigma():
    _, truth = gen_cohort(DgpConfig(seed=6, n_schools=360, ability_class_var_spread=0.0))
    sig = truth.classes.drop_duplicates("class_id")["sigma"]
    assert len(sig) >= 1000
    assert sig.std() < 0.05 * sig.mean()
    _, spread = gen_cohort(DgpConfig(seed=6, n_schools=60, ability_class_var_spread=0.5))
    assert spread.classes["sigma"].std() > 0.1


def test_missing_students_are_lowest(small_config):
    panel, truth = gen_cohort(small_config.replace(missing_rate=0.1))
    ts = truth.students
    g5 = panel.slice(5)
    assert (~g5["observed"]).mean() > 0.03
    for _, grp in ts.groupby(["class_id", "subject"]):
        miss = grp.loc[~grp["observed"], "a_is"]
        if len(miss):
            assert miss.max() <= grp.loc[grp["observed"], "a_is"].min()
    assert g5.loc[~g5["observed"], ["test_score_raw", "class_grade"]].isna().all().all()


def test_outcome_maps():
    a = np.linspace(-2, 2, 9)
    assert np.allclose(outcome_map(a, "linear", 0.5), a)
    assert np.allclose(outcome_map(a, "convex", 0.5), a + 0.5 * a**2)
    pw = outcome_map(a, "piecewise", 0.5)
    assert np.all(np.diff(pw) > 0)


def test_inject_replay_identical(small_cohort):
    panel, truth = small_cohort
    again = inject_rank_effect(panel, truth, truth.beta_visible, truth.delta_invisible)
    assert again.same_data(panel)


def test_inject_never_touches_grade2_or_5(small_cohort):
    panel, truth = small_cohort
    for beta in (0.0, 4.0, 20.0):
        out = inject_rank_effect(panel, truth, beta, 3.0)
        for g in (2, 5):
            assert out.slice(g).equals(panel.slice(g))


def test_inject_requires_simulated(small_cohort):
    panel, truth = small_cohort
    with pytest.raises(NotSimulated):
        inject_rank_effect(panel.replace(provenance="ingested"), truth, 0.0, 0.0)


def test_inject_is_linear_in_beta(ranked_panel, small_cohort, small_params):
    _, truth = small_cohort
    est = {}
    for beta in (0.0, 4.0, 8.0):
        p = inject_rank_effect(ranked_panel, truth, beta, 0.0)
        est[beta] = build_and_fit(p, "main", "g8", params=small_params)
    b = {k: v.params["R_visible"] for k, v in est.items()}
    se = est[4.0].se["R_visible"]
    # same noise draws: each step of 4 moves the estimate by 4, up to the
    # rounding and clipping of outcomes to whole percentiles
    assert (b[4.0] - b[0.0]) == pytest.approx(4.0, abs=0.25 * se)
    assert (b[8.0] - b[4.0]) == pytest.approx(4.0, abs=0.25 * se)


def test_write_truth(tmp_path, small_cohort):
    _, truth = small_cohort
    write_truth(truth, tmp_path)
    head = json.loads((tmp_path / "truth.json").read_text())
    assert head["beta_visible"] == 8.0
    assert (tmp_path / "truth_students.csv").exists() and (tmp_path / "truth_classes.csv").exists()
