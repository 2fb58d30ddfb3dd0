"""Two-rank class-rank-effect toolkit.

Ranks students within classes twice, once on teacher-assigned grades
(visible to students) and once on standardized test scores (invisible),
and estimates how each rank affects later outcomes under high-dimensional
fixed effects.
"""

__version__ = "0.1.0"

from .datamodel import Panel, SelectionConfig, apply_selection, load_panel, write_panel
from .errors import RankfxError
from .hdfe import AbsorptionPlan, FitResult, fit
from .ranking import ordinal_rank, percentile_rank, rank_all, rank_cells, ventile_index
from .simulate import DgpConfig, GroundTruth, gen_cohort, inject_rank_effect
from .specs import SpecKind, SpecParams, build_and_fit, build_design, desk_params

__all__ = [
    "AbsorptionPlan",
    "DgpConfig",
    "FitResult",
    "GroundTruth",
    "Panel",
    "RankfxError",
    "SelectionConfig",
    "SpecKind",
    "SpecParams",
    "apply_selection",
    "build_and_fit",
    "build_design",
    "desk_params",
    "fit",
    "gen_cohort",
    "inject_rank_effect",
    "load_panel",
    "ordinal_rank",
    "percentile_rank",
    "rank_all",
    "rank_cells",
    "ventile_index",
    "write_panel",
]
