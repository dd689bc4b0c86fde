from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch
from loguru import logger

from nrslam.geometry import DTYPE, Pose
from nrslam.gaussians import CanonicalMap
from nrslam.gaussians.basis import MIN_EXTENT
from nrslam.mapping.management import ManagementReport, ManagementThresholds, manage_deformation_field
from nrslam.mapping.responsibility import estimate_responsibility
from nrslam.mapping.window import KeyframeWindow
from nrslam.objectives import LossContext, events_to_dict, probability_pipeline, view_pipeline
from nrslam.renderer import render_frame
from nrslam.tracking.refine import TRACKING_CHANNELS, PoseParameter
from nrslam.tracking.state import TrajectoryStore
from nrslam.utils.logging import BATraceLog
from nrslam.utils.misc import timed

EXTENT_FLOOR = 10 * MIN_EXTENT


@dataclass
class BAResult:
    trace: List[BATraceLog] = field(default_factory=list)
    report: Optional[ManagementReport] = None
    target_probs: Optional[torch.Tensor] = None


def map_param_groups(gmap: CanonicalMap, config, optimize_logits: bool = True) -> List[dict]:
    """Turns the map tensors into leaves and returns Adam groups; position-like rates scale with the scene."""
    mapping, scale = config.mapping, config.scene.scale_mm
    rates = {
        "means": mapping.lr_means * scale,
        "log_scales": mapping.lr_scales,
        "rotations": mapping.lr_rotations,
        "opacity_logits": mapping.lr_opacity,
        "colors": mapping.lr_color,
    }
    if optimize_logits:
        rates["def_logits"] = mapping.lr_logits
    groups = []
    for name, lr in rates.items():
        tensor = getattr(gmap, name).detach().requires_grad_(True)
        setattr(gmap, name, tensor)
        groups.append({"params": [tensor], "lr": lr})
    for attr, bank in gmap.bases:
        if not len(bank):
            continue
        bank.weight = bank.weight.detach().requires_grad_(True)
        bank.center = bank.center.detach().requires_grad_(True)
        bank.extent = bank.extent.detach().requires_grad_(True)
        groups.append({"params": [bank.weight], "lr": mapping.lr_weights * (scale if attr == "mean" else 1.0)})
        groups.append({"params": [bank.center, bank.extent], "lr": mapping.lr_basis_time})
    return groups


def frozen_values(gmap: CanonicalMap) -> Dict[str, tuple]:
    out = {}
    for attr, bank in gmap.bases:
        rows = torch.nonzero(bank.frozen).flatten()
        if len(rows):
            out[attr] = (rows, bank.weight.detach()[rows].clone(), bank.center.detach()[rows].clone(), bank.extent.detach()[rows].clone())
    return out


@torch.no_grad()
def restore_frozen(gmap: CanonicalMap, frozen: Dict[str, tuple]):
    """Puts frozen bases back to their stored values and keeps every extent positive."""
    for attr, bank in gmap.bases:
        if attr in frozen:
            rows, weight, center, extent = frozen[attr]
            bank.weight[rows] = weight
            bank.center[rows] = center
            bank.extent[rows] = extent
        if len(bank):
            bank.extent.clamp_(min=EXTENT_FLOOR)


@timed
def global_deformable_ba(
    gmap: CanonicalMap,
    window: KeyframeWindow,
    store: TrajectoryStore,
    config,
    t: float,
    keyframe: int = -1,
    gate=None,
) -> BAResult:
    """Joint descent on map, deformation field, probabilities and window poses.

    Responsibilities are re-estimated every ``mapping.responsibility_every`` iterations and the
    deformation field is managed once at ``mapping.management_at``. The first stored frame stays fixed.
    """
    mapping = config.mapping
    result = BAResult()
    entries = [e for e in window if e.bundle is not None]
    if not entries or not len(gmap) or mapping.ba_iters == 0:
        return result

    view = view_pipeline(config)
    probability = probability_pipeline(config)
    poses = {e.index: PoseParameter(e.pose) for e in entries if e.index != store.gauge_index}
    previous_w = gmap.def_probs.detach().clone()

    def build_optimizer():
        groups = map_param_groups(gmap, config, mapping.estimate_probability)
        for param in poses.values():
            groups.extend(param.param_groups(mapping.lr_rotation, mapping.lr_translation * config.scene.scale_mm))
        return torch.optim.Adam(groups)

    def current_pose(index: int) -> Pose:
        return poses[index].pose() if index in poses else store[index].pose

    def sync_poses():
        for e in entries:
            if e.index in poses:
                e.pose = poses[e.index].pose().detach()

    optimizer = build_optimizer()
    frozen = frozen_values(gmap)
    for it in range(mapping.ba_iters):
        if mapping.estimate_probability and it % mapping.responsibility_every == 0:
            sync_poses()
            result.target_probs = estimate_responsibility(gmap, entries, t, config, gate)
        if config.management.enabled and it == mapping.management_at:
            sync_poses()
            latest = entries[-1]
            with torch.no_grad():
                render = render_frame(gmap, latest.time, latest.bundle.intrinsics, latest.pose, latest.residuals, channels={"rgb"}, gate=gate)
            result.report = manage_deformation_field(
                gmap,
                t,
                [e.time for e in entries],
                render,
                latest.bundle.image,
                ManagementThresholds.from_config(config),
                store.residual_sets(),
                keyframe,
            )
            optimizer = build_optimizer()
            frozen = frozen_values(gmap)

        anchor_poses = {i: current_pose(i) for i in poses}
        total = torch.zeros((), dtype=DTYPE)
        terms = {"photometric": 0.0, "geometric": 0.0}
        context = None
        for entry in entries:
            frame = entry.bundle
            pose = current_pose(entry.index)
            render = render_frame(gmap, entry.time, frame.intrinsics, pose, entry.residuals, channels=TRACKING_CHANNELS, gate=gate)
            tracks = store.predict_tracks(
                gmap, frame.priors.tracks, frame.intrinsics, entry.index, entry.time, entry.residuals, gate=gate, anchor_poses=anchor_poses
            ) if frame.priors is not None else None
            context = LossContext(
                render=render,
                image=frame.image,
                intrinsics=frame.intrinsics,
                pose=pose,
                priors=frame.priors,
                masks=frame.masks,
                iteration=it,
                tracks=tracks,
            )
            loss, events = view(context)
            total = total + loss / len(entries)
            for event in events:
                terms[event.name] += float(event.loss.detach()) / len(entries)

        context.gmap = gmap
        context.previous_def_probs = previous_w
        context.target_probs = result.target_probs
        regularizer, events = probability(context)
        total = total + regularizer
        info = events_to_dict(events)

        if total.requires_grad:
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            restore_frozen(gmap, frozen)

        result.trace.append(
            BATraceLog(
                keyframe=keyframe,
                iteration=it,
                total=float(total.detach()),
                photometric=terms["photometric"],
                geometric=terms["geometric"],
                bce=info.get("bce_loss", 0.0),
                temporal=info.get("temporal_loss", 0.0),
                spatial=info.get("spatial_loss", 0.0),
            )
        )

    sync_poses()
    gmap.detach_()
    logger.debug(f"BA at keyframe {keyframe}: loss {result.trace[0].total:.6f} -> {result.trace[-1].total:.6f}")
    return result
