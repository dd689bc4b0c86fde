from .window import KeyframeWindow
from .poses import optimize_window_poses, window_tracks
from .extension import DEFAULT_EXTENT, expansion_mask, extend_map, mean_extent
from .responsibility import (
    DEFORMABLE_GATE,
    RIGID_GATE,
    HypothesisStats,
    aggregate_responsibility,
    dual_hypothesis_stats,
    estimate_responsibility,
    posterior_bayes,
    posterior_responsibility,
)
from .management import ManagementReport, ManagementThresholds, activations, manage_deformation_field, similar_sets
from .ba import BAResult, global_deformable_ba
from .initialization import initial_bases, initialize_system, seed_primitives
from .mapper import Mapper, MappingResult
