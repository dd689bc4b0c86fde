import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Optional

import torch

from nrslam.geometry import DTYPE, Intrinsics, Pose
from nrslam.gaussians import CanonicalMap, FrameResiduals
from nrslam.priors import MaskSet, Priors
from nrslam.renderer import RenderOutput


@dataclass(eq=False)
class TrackPrediction:
    """Predicted world positions of tracked points at the current frame, next to their observations.

    ``observed_cam`` is the observed 3D point in the current camera frame, ``observed_px`` the
    observed pixel; ``weight`` multiplies each track's residual.
    """

    world: torch.Tensor
    observed_cam: torch.Tensor
    observed_px: torch.Tensor
    weight: torch.Tensor

    def __len__(self):
        return int(self.world.shape[0])

    @classmethod
    def empty(cls) -> "TrackPrediction":
        z3, z2 = torch.zeros(0, 3, dtype=DTYPE), torch.zeros(0, 2, dtype=DTYPE)
        return cls(z3, z3.clone(), z2, torch.zeros(0, dtype=DTYPE))


@dataclass(eq=False)
class LossContext:
    """Everything a loss term may read for one view."""

    render: RenderOutput
    image: torch.Tensor
    intrinsics: Intrinsics
    pose: Pose
    priors: Optional[Priors] = None
    masks: Optional[MaskSet] = None
    iteration: int = 0
    # per-pixel multiplier, (1 - confidence) when deformation weighting is on
    pixel_weight: Optional[torch.Tensor] = None
    tracks: Optional[TrackPrediction] = None

    gmap: Optional[CanonicalMap] = None
    previous_def_probs: Optional[torch.Tensor] = None
    target_probs: Optional[torch.Tensor] = None
    residuals: Optional[FrameResiduals] = None
    previous_residuals: Optional[FrameResiduals] = None

    def photometric_mask(self) -> torch.Tensor:
        if self.masks is None:
            return torch.ones(self.render.shape, dtype=torch.bool)
        return self.masks.valid & self.masks.covis


@dataclass
class LossOutput:
    loss: torch.Tensor
    extra_info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.loss.dim() != 0:
            raise ValueError(f"Loss must be a scalar, got shape {tuple(self.loss.shape)}")


@dataclass
class ObjectiveEvent:
    """One weighted loss term as evaluated in an optimization step."""

    name: str
    loss: torch.Tensor
    weight: float
    batch_time: float
    extra_info: dict

    @property
    def weighted(self) -> torch.Tensor:
        return self.weight * self.loss

    def asdict(self) -> dict:
        return {
            f"{self.name}_loss": round(float(self.loss.detach()), 9),
            f"{self.name}_weight": self.weight,
            f"{self.name}_time": self.batch_time,
        }


class BaseObjective(ABC):
    @property
    @abstractmethod
    def name(self) -> str:
        ...

    @abstractmethod
    def __init__(self, **kwargs):
        pass

    @abstractmethod
    def loss(self, context: LossContext) -> LossOutput:
        pass

    def apply(self, context: LossContext, weight: float = 1.0) -> ObjectiveEvent:
        t0 = time.time()
        output = self.loss(context)
        return ObjectiveEvent(
            name=self.name,
            loss=output.loss,
            weight=weight,
            batch_time=time.time() - t0,
            extra_info=output.extra_info,
        )

    def __repr__(self):
        return f"{self.__class__.__name__}(name={self.name})"
