from typing import List, Sequence

import numpy as np
import torch
from loguru import logger

from nrslam.geometry import DTYPE, Pose, backproject, predict_constant_velocity
from nrslam.gaussians import ATTRIBUTES, CanonicalMap, FrameResiduals, logit
from nrslam.gaussians.map import initial_scale
from nrslam.mapping.extension import DEFAULT_EXTENT
from nrslam.objectives import LossContext, first_frame_pipeline, view_pipeline
from nrslam.priors import FrameBundle, compute_masks
from nrslam.renderer import render_frame
from nrslam.tracking.refine import refine_pose
from nrslam.tracking.state import FrameState, TrajectoryStore
from nrslam.utils.exceptions import InsufficientFrames, NoDepthPrior

MIN_INIT_FRAMES = 2


def seed_primitives(frame: FrameBundle, pose: Pose, stride: int, opacity: float, def_prob: float) -> CanonicalMap:
    """Back-projects every ``stride``-th pixel with a depth prior into a fresh map."""
    depth = frame.priors.depth
    mask = torch.zeros_like(depth, dtype=torch.bool)
    mask[stride // 2 :: stride, stride // 2 :: stride] = True
    v, u = torch.nonzero(mask & (depth > 0), as_tuple=True)
    if not len(v):
        raise NoDepthPrior(f"Frame {frame.index} has no depth prior to seed the map from")
    d = depth[v, u]
    gmap = CanonicalMap()
    gmap.add_primitives(
        means=backproject(frame.intrinsics, torch.stack([u, v], dim=-1).to(DTYPE), d, pose),
        log_scales=initial_scale(d, frame.intrinsics.fx, stride),
        opacity_logits=torch.full((len(v),), float(logit(opacity)), dtype=DTYPE),
        colors=frame.image[v, u],
        def_logits=torch.full((len(v),), float(logit(def_prob)), dtype=DTYPE),
    )
    return gmap


def fit_first_frame(gmap: CanonicalMap, frame: FrameBundle, config) -> float:
    """Fits canonical attributes to the first frame at the identity pose; returns the final loss."""
    pipeline = first_frame_pipeline(config)
    mapping, scale = config.mapping, config.scene.scale_mm
    rates = {
        "means": mapping.lr_means * scale,
        "log_scales": mapping.lr_scales,
        "rotations": mapping.lr_rotations,
        "opacity_logits": mapping.lr_opacity,
        "colors": mapping.lr_color,
    }
    groups = []
    for name, lr in rates.items():
        tensor = getattr(gmap, name).detach().requires_grad_(True)
        setattr(gmap, name, tensor)
        groups.append({"params": [tensor], "lr": lr})
    optimizer = torch.optim.Adam(groups)
    pose = Pose.identity()
    value = float("nan")
    for k in range(config.init.fit_iters):
        render = render_frame(gmap, frame.time, frame.intrinsics, pose, channels={"rgb", "depth"})
        loss, _ = pipeline(LossContext(render=render, image=frame.image, intrinsics=frame.intrinsics, pose=pose, priors=frame.priors, iteration=k))
        value = float(loss.detach())
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    gmap.detach_()
    return value


def frame_masks(gmap: CanonicalMap, frame: FrameBundle, pose: Pose, config, gate=None):
    with torch.no_grad():
        render = render_frame(gmap, frame.time, frame.intrinsics, pose, channels={"depth"}, gate=gate)
    m = config.masks
    return compute_masks(frame.image, render.transmittance, frame.priors.tracks.u, m.delta, m.tau_T, m.use_validity, m.use_covis)


def initial_bases(gmap: CanonicalMap, times: Sequence[float], num_bases: int, extent_factor: float):
    """``num_bases`` zero-weight bases per attribute and primitive, centers spread uniformly over ``times``."""
    t0, t1 = min(times), max(times)
    centers = np.linspace(t0, t1, num_bases)
    spacing = (t1 - t0) / (num_bases - 1) if num_bases > 1 else t1 - t0
    extent = extent_factor * spacing if spacing > 0 else DEFAULT_EXTENT
    n = len(gmap)
    owner = torch.arange(n).repeat_interleave(num_bases)
    center = torch.as_tensor(np.tile(centers, n), dtype=DTYPE)
    for attr in ATTRIBUTES:
        gmap.bases[attr].append(owner, center, extent)


def initialize_system(frames: List[FrameBundle], config, store: TrajectoryStore, gate=None) -> CanonicalMap:
    """Builds the first map and poses from the initial frames.

    The first frame is back-projected at the identity pose and fitted, the others get pose-only
    optimization, then every primitive receives the deformable prior and a uniform set of
    zero-weight temporal bases. Global bundle adjustment is left to the caller.
    """
    if len(frames) < MIN_INIT_FRAMES:
        raise InsufficientFrames(f"Initialization needs at least {MIN_INIT_FRAMES} frames, got {len(frames)}")
    init, tracking = config.init, config.tracking
    first = frames[0]
    gmap = seed_primitives(first, Pose.identity(), init.stride, init.opacity, config.mapping.new_prob)
    loss = fit_first_frame(gmap, first, config)
    logger.info(f"🌱 Seeded {len(gmap)} primitives from frame {first.index} (fit loss {loss:.5f})")

    first.masks = frame_masks(gmap, first, Pose.identity(), config, gate)
    store.add(FrameState(first.index, first.time, first.timestamp, Pose.identity(), FrameResiduals.empty(first.time), True, first))

    view = view_pipeline(config)
    for frame in frames[1:]:
        states = store.last(2)
        prediction = predict_constant_velocity(states[0].pose, states[1].pose) if len(states) == 2 else states[-1].pose
        frame.masks = frame_masks(gmap, frame, prediction, config, gate)
        with torch.no_grad():
            tracks = store.predict_tracks(gmap, frame.priors.tracks, frame.intrinsics, frame.index, frame.time, None, gate=gate)
        refined = refine_pose(
            gmap,
            frame,
            prediction,
            None,
            tracks,
            view,
            init.pose_iters,
            tracking.lr_rotation,
            tracking.lr_translation * config.scene.scale_mm,
            deformation_weighting=False,
            gate=gate,
        )
        frame.masks = frame_masks(gmap, frame, refined.pose, config, gate)
        store.add(FrameState(frame.index, frame.time, frame.timestamp, refined.pose, FrameResiduals.empty(frame.time), True, frame))
        logger.debug(f"Initial pose of frame {frame.index}: loss {refined.loss_start:.5f} -> {refined.loss_end:.5f}")

    gmap.set_deformation_probability(torch.arange(len(gmap)), config.mapping.new_prob)
    initial_bases(gmap, [f.time for f in frames], init.num_bases, init.extent_factor)
    gmap.rebuild_neighbors(config.mapping.neighbors)
    return gmap
