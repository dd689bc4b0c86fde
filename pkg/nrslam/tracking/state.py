from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

import torch

from nrslam.geometry import Intrinsics, Pose
from nrslam.gaussians import CanonicalMap, FrameResiduals
from nrslam.objectives import TrackPrediction, predict_tracks
from nrslam.priors import FrameBundle, Tracks
from nrslam.renderer import render_frame


@dataclass(eq=False)
class FrameState:
    """Estimated state of a processed frame: pose and per-frame residuals."""

    index: int
    time: float
    timestamp: float
    pose: Pose
    residuals: FrameResiduals
    is_keyframe: bool = False
    bundle: Optional[FrameBundle] = None


class TrajectoryStore:
    """Every processed frame by index."""

    def __init__(self):
        self.states: Dict[int, FrameState] = {}

    def __len__(self):
        return len(self.states)

    def __contains__(self, index: int):
        return index in self.states

    def __getitem__(self, index: int) -> FrameState:
        return self.states[index]

    def __iter__(self):
        return iter(self.states[i] for i in sorted(self.states))

    def add(self, state: FrameState):
        self.states[state.index] = state

    @property
    def gauge_index(self) -> Optional[int]:
        """The first stored frame, held at its initial pose to fix the gauge."""
        return min(self.states) if self.states else None

    def last(self, n: int = 1) -> List[FrameState]:
        return [self.states[i] for i in sorted(self.states)[-n:]]

    def keyframes(self) -> List[FrameState]:
        return [s for s in self if s.is_keyframe]

    def last_keyframe(self) -> Optional[FrameState]:
        keyframes = self.keyframes()
        return keyframes[-1] if keyframes else None

    def residual_sets(self) -> Iterable[FrameResiduals]:
        return (s.residuals for s in self.states.values())

    def predict_tracks(
        self,
        gmap: CanonicalMap,
        tracks: Tracks,
        K: Intrinsics,
        current_index: int,
        target_time: float,
        target_residuals: Optional[FrameResiduals],
        confidence: Optional[torch.Tensor] = None,
        gate=None,
        anchor_poses: Optional[Dict[int, Pose]] = None,
    ) -> TrackPrediction:
        """Map-predicted world positions at ``target_time`` of every track whose anchor is a known, earlier frame.

        ``anchor_poses`` overrides stored anchor poses (poses under optimization).
        """
        if tracks is None or not len(tracks):
            return TrackPrediction.empty()
        predictions = []
        for anchor in tracks.anchors():
            if anchor == current_index or anchor not in self.states:
                continue
            state = self.states[anchor]
            pose = state.pose if anchor_poses is None or anchor not in anchor_poses else anchor_poses[anchor]
            render = render_frame(
                gmap,
                state.time,
                K,
                pose,
                state.residuals,
                channels={"depth"},
                gate=gate,
                target=(target_time, target_residuals),
            )
            predictions.append(predict_tracks(render, tracks.select(tracks.start_frame == anchor), K, pose, confidence))
        predictions = [p for p in predictions if len(p)]
        if not predictions:
            return TrackPrediction.empty()
        return TrackPrediction(
            world=torch.cat([p.world for p in predictions]),
            observed_cam=torch.cat([p.observed_cam for p in predictions]),
            observed_px=torch.cat([p.observed_px for p in predictions]),
            weight=torch.cat([p.weight for p in predictions]),
        )
