import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
from loguru import logger

from nrslam.gaussians import CanonicalMap
from nrslam.mapping.ba import BAResult, global_deformable_ba
from nrslam.mapping.extension import extend_map
from nrslam.mapping.initialization import initialize_system
from nrslam.mapping.management import ManagementReport
from nrslam.mapping.poses import optimize_window_poses
from nrslam.mapping.window import KeyframeWindow
from nrslam.objectives import view_pipeline
from nrslam.priors import FrameBundle
from nrslam.renderer import render_frame
from nrslam.tracking.state import FrameState, TrajectoryStore
from nrslam.utils.logging import BATraceLog


@dataclass(eq=False)
class MappingResult:
    keyframe: int
    new_primitives: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=torch.long))
    marginalized: Optional[FrameState] = None
    report: Optional[ManagementReport] = None
    trace: List[BATraceLog] = field(default_factory=list)
    duration: float = 0.0

    @classmethod
    def from_ba(cls, keyframe: int, ba: BAResult, **kwargs) -> "MappingResult":
        return cls(keyframe=keyframe, report=ba.report, trace=ba.trace, **kwargs)


class Mapper:
    """Keyframe window upkeep: pose optimization, map extension and global deformable bundle adjustment."""

    def __init__(self, config, store: TrajectoryStore, gate=None):
        self.config = config
        self.store = store
        self.gate = gate
        self.window = KeyframeWindow(config.mapping.window)
        self.view = view_pipeline(config)

    def initialize(self, frames: List[FrameBundle]) -> Tuple[CanonicalMap, MappingResult]:
        start = time.time()
        gmap = initialize_system(frames, self.config, self.store, self.gate)
        marginalized = None
        for frame in frames:
            marginalized = self.window.push(self.store[frame.index]) or marginalized
        latest = self.window.latest
        ba = global_deformable_ba(gmap, self.window, self.store, self.config, latest.time, latest.index, self.gate)
        result = MappingResult.from_ba(latest.index, ba, marginalized=marginalized, new_primitives=torch.arange(len(gmap)))
        result.duration = time.time() - start
        logger.info(f"🗺️ Initialized {gmap} over keyframes {self.window.indices} in {result.duration:.2f}s")
        return gmap, result

    def on_keyframe(self, gmap: CanonicalMap, state: FrameState) -> MappingResult:
        start = time.time()
        mapping = self.config.mapping
        marginalized = self.window.push(state)
        if marginalized is not None:
            logger.debug(f"Keyframe {marginalized.index} left the window")

        if mapping.optimize_poses and len(self.window) > 1:
            optimize_window_poses(
                gmap,
                self.window,
                self.store,
                self.view,
                mapping.pose_iters,
                mapping.lr_rotation,
                mapping.lr_translation * self.config.scene.scale_mm,
                self.config.tracking.deformation_weighting,
                self.gate,
            )

        frame = state.bundle
        with torch.no_grad():
            render = render_frame(gmap, state.time, frame.intrinsics, state.pose, state.residuals, channels={"depth"}, gate=self.gate)
        new = extend_map(
            gmap,
            frame,
            state.pose,
            render.transmittance,
            mapping.extension_stride,
            mapping.extension_tau,
            mapping.new_prob,
            self.config.init.opacity,
        )
        gmap.rebuild_neighbors(mapping.neighbors)

        ba = global_deformable_ba(gmap, self.window, self.store, self.config, state.time, state.index, self.gate)
        result = MappingResult.from_ba(state.index, ba, marginalized=marginalized, new_primitives=new)
        result.duration = time.time() - start
        logger.info(
            f"🗺️ Keyframe {state.index}: +{len(new)} primitives, {gmap}, "
            f"BA {ba.trace[0].total if ba.trace else float('nan'):.5f} -> {ba.trace[-1].total if ba.trace else float('nan'):.5f}"
        )
        return result
