from dataclasses import dataclass, field
from typing import Callable, List, Optional

import torch

from nrslam.geometry import Pose
from nrslam.gaussians import ATTRIBUTES, CanonicalMap, FrameResiduals
from nrslam.objectives import LossContext, ObjectiveEvent, ObjectivePipeline, TrackPrediction
from nrslam.priors import FrameBundle
from nrslam.renderer import render_frame
from nrslam.tracking.refine import TRACKING_CHANNELS


@dataclass
class DeformationResult:
    residuals: FrameResiduals
    loss_start: Optional[float] = None
    loss_end: Optional[float] = None
    events: List[ObjectiveEvent] = field(default_factory=list)


def allocate_residuals(
    gmap: CanonicalMap,
    time: float,
    eps_def: float,
    warm_start: Optional[FrameResiduals] = None,
    full_update: bool = False,
) -> FrameResiduals:
    """Residuals on the active bases of every primitive with w_d > ``eps_def`` (every primitive with ``full_update``)."""
    if full_update:
        active = torch.ones(len(gmap), dtype=torch.bool)
    else:
        active = gmap.def_probs.detach() > eps_def
    return FrameResiduals.allocate(gmap.bases, time, active, warm_start=warm_start)


def estimate_frame_deformation(
    gmap: CanonicalMap,
    frame: FrameBundle,
    pose: Pose,
    previous: Optional[FrameResiduals],
    predict_tracks: Callable[[FrameResiduals], TrackPrediction],
    pipeline: ObjectivePipeline,
    iters: int,
    lr: float,
    scale_mm: float = 1.0,
    eps_def: float = 0.5,
    full_update: bool = False,
    gate=None,
) -> DeformationResult:
    """Per-frame residual weights at a fixed pose, warm-started from ``previous``.

    ``predict_tracks`` maps the candidate residuals to the track prediction so the geometric
    term sees the displacement they induce. Returns the lowest-loss iterate.
    """
    residuals = allocate_residuals(gmap, frame.time, eps_def, previous, full_update)
    if not len(residuals):
        return DeformationResult(residuals=residuals)
    residuals.requires_grad_(True)
    groups = []
    for attr in ATTRIBUTES:
        value = residuals.values[attr]
        if value.numel():
            groups.append({"params": [value], "lr": lr * scale_mm if attr == "mean" else lr})
    optimizer = torch.optim.Adam(groups)

    best_loss, best, loss_start, events = float("inf"), residuals.detach(), None, []
    for k in range(iters + 1):
        render = render_frame(gmap, frame.time, frame.intrinsics, pose, residuals, channels=TRACKING_CHANNELS, gate=gate)
        context = LossContext(
            render=render,
            image=frame.image,
            intrinsics=frame.intrinsics,
            pose=pose,
            priors=frame.priors,
            masks=frame.masks,
            iteration=k,
            tracks=predict_tracks(residuals),
            residuals=residuals,
            previous_residuals=previous,
        )
        loss, events = pipeline(context)
        value = float(loss.detach())
        if loss_start is None:
            loss_start = value
        if value < best_loss:
            best_loss, best = value, residuals.detach()
        if k == iters or not loss.requires_grad:
            break
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return DeformationResult(residuals=best, loss_start=loss_start, loss_end=best_loss, events=events)
