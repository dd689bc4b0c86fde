import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
from loguru import logger

from nrslam.geometry import Pose, predict_constant_velocity
from nrslam.gaussians import CanonicalMap, FrameResiduals
from nrslam.objectives import ObjectiveEvent, TrackPrediction, deformation_pipeline, view_pipeline
from nrslam.priors import FrameBundle, MaskSet, compute_masks, covis_mask
from nrslam.renderer import render_frame
from nrslam.tracking.deformation import estimate_frame_deformation
from nrslam.tracking.keyframe import KeyframeDecision, keyframe_decision, relative_residual_ratio
from nrslam.tracking.pnp import Correspondences, build_correspondences, coarse_pose
from nrslam.tracking.refine import TRACKING_CHANNELS, refine_pose
from nrslam.tracking.state import FrameState, TrajectoryStore
from nrslam.utils.misc import frame_rng


@dataclass(eq=False)
class TrackingResult:
    state: FrameState
    masks: MaskSet
    decision: KeyframeDecision
    inlier_ratio: float = 0.0
    pnp_status: str = "skipped"
    refine_loss_start: Optional[float] = None
    refine_loss_end: Optional[float] = None
    deform_loss_start: Optional[float] = None
    deform_loss_end: Optional[float] = None
    events: List[ObjectiveEvent] = field(default_factory=list)
    duration: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.inlier_ratio <= 1.0:
            raise ValueError(f"Inlier ratio must be in [0, 1], got {self.inlier_ratio}")

    @property
    def pose(self) -> Pose:
        return self.state.pose

    @property
    def residuals(self) -> FrameResiduals:
        return self.state.residuals


class Tracker:
    """Two-stage pose estimation (weighted PnP, then refinement), per-frame deformation and keyframe selection.

    The map is read-only here; every processed frame is added to ``store``.
    """

    def __init__(self, config, store: TrajectoryStore, gate=None):
        self.config = config
        self.store = store
        self.gate = gate
        self.view = view_pipeline(config)
        self.deformation = deformation_pipeline(config)

    def predict(self) -> Pose:
        states = self.store.last(2)
        if len(states) == 2:
            return predict_constant_velocity(states[0].pose, states[1].pose)
        return states[-1].pose

    def masks(self, gmap: CanonicalMap, frame: FrameBundle, pose: Pose, residuals: Optional[FrameResiduals]) -> MaskSet:
        with torch.no_grad():
            render = render_frame(gmap, frame.time, frame.intrinsics, pose, residuals, channels={"depth"}, gate=self.gate)
        masks = self.config.masks
        return compute_masks(
            frame.image, render.transmittance, frame.priors.tracks.u, masks.delta, masks.tau_T, masks.use_validity, masks.use_covis
        )

    def correspondences(self, gmap: CanonicalMap, frame: FrameBundle) -> Correspondences:
        tracks = frame.priors.tracks
        corr = Correspondences.empty()
        with torch.no_grad():
            for anchor in tracks.anchors():
                if anchor == frame.index or anchor not in self.store:
                    continue
                state = self.store[anchor]
                render = render_frame(
                    gmap, state.time, frame.intrinsics, state.pose, state.residuals, channels={"depth", "confidence"}, gate=self.gate
                )
                corr = corr + build_correspondences(
                    render, tracks.select(tracks.start_frame == anchor), frame.intrinsics, state.pose, self.config.tracking.tau_def
                )
        if not self.config.tracking.deformation_weighting:
            corr.weights = np.ones_like(corr.weights)
        return corr

    def track_frame(self, gmap: CanonicalMap, frame: FrameBundle) -> TrackingResult:
        t0 = time.time()
        cfg = self.config.tracking
        K = frame.intrinsics
        previous = self.store.last(1)[0]
        prediction = self.predict()
        frame.masks = self.masks(gmap, frame, prediction, previous.residuals)

        pose, inlier_ratio, status = prediction, 0.0, "skipped"
        if cfg.use_pnp:
            pose, inlier_ratio, status = coarse_pose(
                self.correspondences(gmap, frame),
                K,
                frame_rng(self.config.seed, frame.index),
                prediction,
                cfg.pnp_threshold,
                cfg.pnp_iters,
                cfg.pnp_confidence,
            )

        refine_start = refine_end = None
        events = []
        if cfg.use_refine:
            with torch.no_grad():
                confidence = None
                if cfg.deformation_weighting:
                    confidence = render_frame(
                        gmap, frame.time, K, pose, previous.residuals, channels=TRACKING_CHANNELS, gate=self.gate
                    ).confidence
                tracks = self.store.predict_tracks(
                    gmap, frame.priors.tracks, K, frame.index, frame.time, previous.residuals, confidence, self.gate
                )
            refined = refine_pose(
                gmap,
                frame,
                pose,
                previous.residuals,
                tracks,
                self.view,
                cfg.refine_iters,
                cfg.lr_rotation,
                cfg.lr_translation * self.config.scene.scale_mm,
                cfg.deformation_weighting,
                self.gate,
            )
            pose, refine_start, refine_end, events = refined.pose, refined.loss_start, refined.loss_end, refined.events

        def predict(residuals: FrameResiduals) -> TrackPrediction:
            return self.store.predict_tracks(gmap, frame.priors.tracks, K, frame.index, frame.time, residuals, gate=self.gate)

        deformed = estimate_frame_deformation(
            gmap,
            frame,
            pose,
            previous.residuals,
            predict,
            self.deformation,
            cfg.deform_iters,
            cfg.lr_residual,
            self.config.scene.scale_mm,
            cfg.eps_def,
            cfg.full_update,
            self.gate,
        )
        residuals = deformed.residuals

        frame.masks = self.masks(gmap, frame, pose, residuals)
        covis_ratio = float(covis_mask(frame.masks.map_mask, frame.masks.track_mask).to(torch.float64).mean())
        last_keyframe = self.store.last_keyframe()
        kf = self.config.keyframe
        decision = keyframe_decision(
            covis_ratio=covis_ratio,
            rdef=relative_residual_ratio(gmap, residuals, cfg.eps_def, kf.rdef_eps),
            translation=pose.translation_distance(last_keyframe.pose) if last_keyframe else 0.0,
            frames_since=frame.index - last_keyframe.index if last_keyframe else 0,
            covis_threshold=kf.covis_ratio,
            rdef_threshold=kf.rdef,
            translation_threshold=kf.translation,
            interval=kf.interval,
        )

        state = FrameState(
            index=frame.index,
            time=frame.time,
            timestamp=frame.timestamp,
            pose=pose.detach(),
            residuals=residuals.detach(),
            is_keyframe=decision.is_keyframe,
            bundle=frame,
        )
        self.store.add(state)
        logger.debug(
            f"Frame {frame.index}: pnp={status} inliers={inlier_ratio:.2f} covis={covis_ratio:.2f} "
            f"rdef={decision.rdef:.3f} keyframe={decision.reason or '-'}"
        )
        return TrackingResult(
            state=state,
            masks=frame.masks,
            decision=decision,
            inlier_ratio=inlier_ratio,
            pnp_status=status,
            refine_loss_start=refine_start,
            refine_loss_end=refine_end,
            deform_loss_start=deformed.loss_start,
            deform_loss_end=deformed.loss_end,
            events=events + deformed.events,
            duration=time.time() - t0,
        )
