from .state import FrameState, TrajectoryStore
from .pnp import Correspondences, build_correspondences, coarse_pose, weighted_pnp
from .refine import PoseParameter, RefineResult, refine_pose
from .deformation import DeformationResult, allocate_residuals, estimate_frame_deformation
from .keyframe import REASONS, KeyframeDecision, keyframe_decision, relative_residual_ratio
from .tracker import Tracker, TrackingResult
