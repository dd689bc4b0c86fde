from .base import BaseObjective, LossContext, LossOutput, ObjectiveEvent, TrackPrediction
from .photometric import (
    PhotometricL1Objective,
    PhotometricL2Objective,
    SSIMMixObjective,
    photometric_l1,
    photometric_l2,
    photometric_ssim_mix,
    ssim,
)
from .geometric import (
    AnnealSchedule,
    DepthL1Objective,
    GeometricObjective,
    RobustPenalty,
    anneal_weight,
    geometric_loss,
    geometric_terms,
    irls_term,
    irls_weight,
    predict_tracks,
    sample_bilinear,
)
from .regularizers import (
    BCEObjective,
    ResidualMagnitudeObjective,
    ResidualTemporalObjective,
    SpatialSmoothnessObjective,
    TemporalSmoothnessObjective,
    bce_loss,
    smoothness_regularizers,
    spatial_probability_loss,
    temporal_probability_loss,
)
from .pipeline import (
    OBJECTIVES,
    ObjectivePipeline,
    deformation_pipeline,
    events_to_dict,
    first_frame_pipeline,
    geometric_definition,
    probability_pipeline,
    view_pipeline,
)
