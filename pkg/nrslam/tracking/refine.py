from dataclasses import dataclass, field
from typing import List, Optional

import torch

from nrslam.geometry import DTYPE, Intrinsics, Pose
from nrslam.gaussians import CanonicalMap, FrameResiduals
from nrslam.objectives import LossContext, ObjectiveEvent, ObjectivePipeline, TrackPrediction
from nrslam.priors import FrameBundle
from nrslam.renderer import render_frame

TRACKING_CHANNELS = frozenset({"rgb", "depth", "confidence"})


class PoseParameter:
    """Optimizable pose ``exp(omega; v) ∘ base`` with the twist split into rotation and translation."""

    def __init__(self, base: Pose):
        self.base = base.detach()
        self.omega = torch.zeros(3, dtype=DTYPE, requires_grad=True)
        self.v = torch.zeros(3, dtype=DTYPE, requires_grad=True)

    def pose(self) -> Pose:
        return self.base.retract(torch.cat([self.omega, self.v]))

    def param_groups(self, lr_rotation: float, lr_translation: float) -> List[dict]:
        return [{"params": [self.omega], "lr": lr_rotation}, {"params": [self.v], "lr": lr_translation}]


@dataclass
class RefineResult:
    pose: Pose
    loss_start: float
    loss_end: float
    events: List[ObjectiveEvent] = field(default_factory=list)


def refine_pose(
    gmap: CanonicalMap,
    frame: FrameBundle,
    initial: Pose,
    residuals: Optional[FrameResiduals],
    tracks: TrackPrediction,
    pipeline: ObjectivePipeline,
    iters: int,
    lr_rotation: float,
    lr_translation: float,
    deformation_weighting: bool = True,
    gate=None,
) -> RefineResult:
    """Pose-only Adam on the photometric and geometric losses; returns the lowest-loss iterate.

    The map is held fixed. With ``deformation_weighting`` every pixel is weighted by one minus
    the rendered deformation confidence.
    """
    K: Intrinsics = frame.intrinsics
    param = PoseParameter(initial)
    optimizer = torch.optim.Adam(param.param_groups(lr_rotation, lr_translation))
    best_loss, best_pose, loss_start, events = float("inf"), initial.detach(), None, []
    for k in range(iters + 1):
        pose = param.pose()
        render = render_frame(gmap, frame.time, K, pose, residuals, channels=TRACKING_CHANNELS, gate=gate)
        pixel_weight = 1 - render.confidence.detach().clamp(0, 1) if deformation_weighting else None
        context = LossContext(
            render=render,
            image=frame.image,
            intrinsics=K,
            pose=pose,
            priors=frame.priors,
            masks=frame.masks,
            iteration=k,
            pixel_weight=pixel_weight,
            tracks=tracks,
        )
        loss, events = pipeline(context)
        value = float(loss.detach())
        if loss_start is None:
            loss_start = value
        if value < best_loss:
            best_loss, best_pose = value, pose.detach()
        if k == iters or not loss.requires_grad:
            break
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return RefineResult(pose=best_pose, loss_start=loss_start, loss_end=best_loss, events=events)
