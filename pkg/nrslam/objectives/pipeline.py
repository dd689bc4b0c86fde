from typing import Dict, List, Tuple

import torch

from nrslam.geometry import DTYPE
from nrslam.objectives.base import BaseObjective, LossContext, ObjectiveEvent
from nrslam.objectives.geometric import DepthL1Objective, GeometricObjective
from nrslam.objectives.photometric import PhotometricL1Objective, PhotometricL2Objective, SSIMMixObjective
from nrslam.objectives.regularizers import (
    BCEObjective,
    ResidualMagnitudeObjective,
    ResidualTemporalObjective,
    SpatialSmoothnessObjective,
    TemporalSmoothnessObjective,
)

OBJECTIVES = {
    "photometric": PhotometricL2Objective,
    "photometric_l1": PhotometricL1Objective,
    "ssim_mix": SSIMMixObjective,
    "geometric": GeometricObjective,
    "depth_l1": DepthL1Objective,
    "bce": BCEObjective,
    "temporal": TemporalSmoothnessObjective,
    "spatial": SpatialSmoothnessObjective,
    "residual_reg": ResidualMagnitudeObjective,
    "residual_temporal": ResidualTemporalObjective,
}


class ObjectivePipeline:
    """Weighted sum of loss terms built from a definition like ``[dict(name="photometric", weight=1.0)]``.

    Keys other than ``name`` and ``weight`` are passed to the objective's constructor.
    """

    def __init__(self, definition: List[dict]):
        self.definition = definition
        self.validate_definition()
        self.load_objectives()

    def __getitem__(self, __key: str) -> BaseObjective:
        return self.objectives.get(__key)

    def get(self, __key: str) -> BaseObjective:
        return self.objectives.get(__key)

    def __repr__(self):
        return f"ObjectivePipeline({self.objectives})"

    def validate_definition(self):
        for info in self.definition:
            if not isinstance(info, dict):
                raise ValueError(f"Objective {info} is not a dictionary.")
            if "name" not in info:
                raise ValueError(f"Objective {info} does not have a name.")
            if info["name"] not in OBJECTIVES:
                raise ValueError(f"Objective {info['name']} not supported. Please choose from {OBJECTIVES.keys()}")
            if "weight" not in info:
                raise ValueError(f"Objective {info} does not have a weight.")
            weight = info["weight"]
            if isinstance(weight, bool) or not isinstance(weight, (float, int)):
                raise ValueError(f"Objective {info} weight is not a float.")
            if weight < 0:
                raise ValueError(f"Objective {info} weight is negative.")

    def load_objectives(self):
        objectives = {}
        for info in self.definition:
            name = info["name"]
            if name in objectives:
                raise ValueError(f"Objective {name} is listed twice.")
            params = {k: v for k, v in info.items() if k not in ["name", "weight"]}
            objectives[name] = OBJECTIVES[name](**params)
        self.objectives = objectives
        self.weights = {info["name"]: float(info["weight"]) for info in self.definition}

    def __call__(self, context: LossContext) -> Tuple[torch.Tensor, List[ObjectiveEvent]]:
        total = torch.zeros((), dtype=DTYPE)
        events = []
        for name, objective in self.objectives.items():
            weight = self.weights[name]
            if weight == 0:
                continue
            event = objective.apply(context, weight)
            events.append(event)
            total = total + event.weighted
        return total, events


def events_to_dict(events: List[ObjectiveEvent]) -> Dict[str, float]:
    state = {}
    for event in events:
        state.update(event.asdict())
    return state


def geometric_definition(config) -> dict:
    geo = config.geometric
    return dict(
        name="geometric",
        weight=geo.weight if geo.enabled else 0.0,
        lambda0=geo.lambda0,
        lambda_min=geo.lambda_min,
        tau=geo.tau,
        robust=geo.robust,
        huber_threshold=geo.huber_threshold,
        depth_weight=geo.depth_weight,
        traj2d_weight=geo.traj2d_weight,
        traj3d_weight=geo.traj3d_weight,
    )


def view_pipeline(config) -> ObjectivePipeline:
    """Photometric plus annealed geometric loss of one view, used by tracking and mapping."""
    return ObjectivePipeline([dict(name="photometric", weight=1.0), geometric_definition(config)])


def deformation_pipeline(config) -> ObjectivePipeline:
    return ObjectivePipeline(
        [
            dict(name="photometric", weight=1.0),
            geometric_definition(config),
            dict(name="residual_reg", weight=config.tracking.lambda_reg),
            dict(name="residual_temporal", weight=config.tracking.lambda_tem),
        ]
    )


def probability_pipeline(config) -> ObjectivePipeline:
    """Supervision and smoothness of the deformation probabilities during bundle adjustment."""
    mapping = config.mapping
    return ObjectivePipeline(
        [
            dict(name="bce", weight=mapping.lambda_w if mapping.estimate_probability else 0.0),
            dict(name="temporal", weight=mapping.lambda_temp),
            dict(name="spatial", weight=mapping.lambda_spatial),
        ]
    )


def first_frame_pipeline(config) -> ObjectivePipeline:
    """SSIM-mixed photometric loss plus L1 depth for fitting the first frame."""
    return ObjectivePipeline(
        [
            dict(name="ssim_mix", weight=1.0, lam=config.init.ssim_lambda),
            dict(name="depth_l1", weight=config.init.depth_weight),
        ]
    )
