import numpy as np
import pandas as pd
import pytest

from rankfx.datamodel import apply_selection
from rankfx.ranking import rank_all
from rankfx.simulate import DgpConfig, gen_cohort
from rankfx.specs import desk_params


@pytest.fixture(scope="session")
def small_config():
    return DgpConfig(seed=11, n_schools=60)


@pytest.fixture(scope="session")
def small_cohort(small_config):
    return gen_cohort(small_config)


@pytest.fixture(scope="session")
def ranked_panel(small_cohort):
    panel, _ = small_cohort
    return rank_all(apply_selection(panel))


@pytest.fixture(scope="session")
def small_params(ranked_panel):
    return desk_params(int((ranked_panel.rosters["grade_level"] == 5).sum()))


def long_rows(rows):
    """Build an ingest-format frame from compact dicts, filling defaults."""
    base = {
        "cohort": 2018,
        "female": 0,
        "immigrant": 0,
        "ses": 0.0,
        "coverage": 1.0,
        "cheating_propensity": 0.0,
    }
    return pd.DataFrame([{**base, **r} for r in rows])


def two_class_rows(n=4, grade=5, seed=0):
    """Two classes of ``n`` students, both subjects, at grades 2, 5 and 8."""
    rng = np.random.default_rng(seed)
    rows = []
    for c in range(2):
        for i in range(n):
            sid = f"s{c}{i}"
            for subject in ("italian", "math"):
                for g in (2, grade, 8):
                    rows.append(
                        {
                            "student_id": sid,
                            "subject": subject,
                            "grade_level": g,
                            "class_id": f"c{c}g{g}",
                            "school_id": "sch0",
                            "test_score": float(rng.integers(100, 300)),
                            "class_grade": float(rng.integers(5, 11)),
                        }
                    )
    return long_rows(rows)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
