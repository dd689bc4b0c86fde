from typing import Dict

import torch
from loguru import logger

from nrslam.geometry import DTYPE, Pose
from nrslam.gaussians import CanonicalMap
from nrslam.mapping.window import KeyframeWindow
from nrslam.objectives import LossContext, ObjectivePipeline, TrackPrediction
from nrslam.renderer import render_frame
from nrslam.tracking.refine import TRACKING_CHANNELS, PoseParameter
from nrslam.tracking.state import TrajectoryStore


def window_tracks(gmap: CanonicalMap, window: KeyframeWindow, store: TrajectoryStore, gate=None) -> Dict[int, TrackPrediction]:
    """Map-predicted tracks of every window keyframe, weighted by one minus the keyframe's confidence."""
    predictions = {}
    with torch.no_grad():
        for entry in window:
            frame = entry.bundle
            if frame is None or frame.priors is None:
                predictions[entry.index] = TrackPrediction.empty()
                continue
            confidence = render_frame(
                gmap, entry.time, frame.intrinsics, entry.pose, entry.residuals, channels=TRACKING_CHANNELS, gate=gate
            ).confidence
            predictions[entry.index] = store.predict_tracks(
                gmap, frame.priors.tracks, frame.intrinsics, entry.index, entry.time, entry.residuals, confidence, gate
            )
    return predictions


def optimize_window_poses(
    gmap: CanonicalMap,
    window: KeyframeWindow,
    store: TrajectoryStore,
    pipeline: ObjectivePipeline,
    iters: int = 20,
    lr_rotation: float = 2e-4,
    lr_translation: float = 5e-4,
    deformation_weighting: bool = True,
    gate=None,
) -> Dict[int, Pose]:
    """Confidence-weighted photometric and geometric descent on the window poses with the map held fixed.

    The first stored frame anchors the gauge and is never moved. Poses are written back to the
    window entries at the lowest-loss iterate.
    """
    params = {e.index: PoseParameter(e.pose) for e in window if e.index != store.gauge_index and e.bundle is not None}
    if not params or iters == 0:
        return {e.index: e.pose for e in window}
    groups = []
    for param in params.values():
        groups.extend(param.param_groups(lr_rotation, lr_translation))
    optimizer = torch.optim.Adam(groups)
    tracks = window_tracks(gmap, window, store, gate)

    best_loss, best, first = float("inf"), {i: e.pose.detach() for i, e in zip(window.indices, window)}, None
    for k in range(iters + 1):
        total = torch.zeros((), dtype=DTYPE)
        poses = {}
        for entry in window:
            frame = entry.bundle
            if frame is None:
                continue
            pose = params[entry.index].pose() if entry.index in params else entry.pose
            poses[entry.index] = pose
            render = render_frame(gmap, entry.time, frame.intrinsics, pose, entry.residuals, channels=TRACKING_CHANNELS, gate=gate)
            context = LossContext(
                render=render,
                image=frame.image,
                intrinsics=frame.intrinsics,
                pose=pose,
                priors=frame.priors,
                masks=frame.masks,
                iteration=k,
                pixel_weight=1 - render.confidence.detach().clamp(0, 1) if deformation_weighting else None,
                tracks=tracks[entry.index],
            )
            loss, _ = pipeline(context)
            total = total + loss
        value = float(total.detach())
        first = value if first is None else first
        if value < best_loss:
            best_loss, best = value, {i: p.detach() for i, p in poses.items()}
        if k == iters or not total.requires_grad:
            break
        optimizer.zero_grad()
        total.backward()
        optimizer.step()

    for entry in window:
        if entry.index in best:
            entry.pose = best[entry.index]
    logger.debug(f"Window pose optimization: loss {first:.6f} -> {best_loss:.6f}")
    return best
