import os
import time
from typing import List, Optional

import numpy as np
import torch
from loguru import logger
from tqdm import tqdm

from nrslam.gaussians import CanonicalMap, save_snapshot
from nrslam.mapping import DEFORMABLE_GATE, Mapper, MappingResult
from nrslam.priors import PROVIDERS, FrameBundle, PriorNoise, PriorProvider, SequenceDataset, TrackSeeder, acquire_priors
from nrslam.priors.files import write_depth, write_image, write_trajectory
from nrslam.renderer import render_frame
from nrslam.simulator import load_ground_truth
from nrslam.tracking import Tracker, TrackingResult, TrajectoryStore
from nrslam.tracking.state import FrameState
from nrslam.utils.config import save_config
from nrslam.utils.exceptions import DatasetNotFound, FrameError, InsufficientFrames
from nrslam.utils.logging import FrameLog, export_csv, log_event
from nrslam.utils.misc import seed_everything, serialize_exception_to_string

DUMPABLE_CHANNELS = ("rgb", "depth", "confidence", "transmittance")


def build_provider(config, dataset: SequenceDataset) -> PriorProvider:
    name = config.dataset.provider
    if name not in PROVIDERS:
        raise ValueError(f"Unknown prior provider {name!r}. Please choose from {list(PROVIDERS)}")
    if name == "oracle":
        ground_truth = load_ground_truth(dataset.root)
        if ground_truth is None:
            raise DatasetNotFound(f"The oracle provider needs a simulated dataset with spec.txt, {dataset.root!r} has none")
        noise = PriorNoise(config.priors.depth_noise, config.priors.track_noise_px, config.priors.track_noise_mm)
        return PROVIDERS[name](ground_truth, noise=noise, seed=config.seed)
    return PROVIDERS[name](dataset.root)


class SlamSystem:
    """Sequential tracking and mapping over a dataset, writing every run artifact into ``config.full_path``."""

    def __init__(self, config, dataset: Optional[SequenceDataset] = None, provider: Optional[PriorProvider] = None):
        self.config = config
        self.dataset = dataset or SequenceDataset(config.dataset.path)
        self.provider = provider or build_provider(config, self.dataset)
        self.gate = None if config.mapping.gating else DEFORMABLE_GATE
        self.store = TrajectoryStore()
        self.tracker = Tracker(config, self.store, self.gate)
        self.mapper = Mapper(config, self.store, self.gate)
        self.seeder = TrackSeeder(config.priors.buffer_size, first_anchor=config.dataset.start)
        self.gmap: Optional[CanonicalMap] = None
        self.num_keyframes = 0
        self.run_dir = config.full_path
        logger.info(f"Loaded {self.dataset} with {self.provider}")

    def path(self, *parts: str) -> str:
        return os.path.join(self.run_dir, *parts)

    @property
    def frame_indices(self) -> List[int]:
        end = len(self.dataset) if self.config.dataset.end < 0 else min(self.config.dataset.end, len(self.dataset))
        return list(range(self.config.dataset.start, end))

    def load_frame(self, index: int) -> FrameBundle:
        frame = self.dataset.frame(index)
        frame.priors = acquire_priors(frame, self.provider, self.seeder.anchor)
        return frame

    def run(self) -> TrajectoryStore:
        seed_everything(self.config.seed)
        for sub in ("residuals", "map"):
            os.makedirs(self.path(sub), exist_ok=True)
        save_config(self.config, self.path("config.txt"))
        indices = self.frame_indices
        num_init = min(self.config.init.frames, len(indices))
        if num_init < 2:
            raise InsufficientFrames(f"Need at least 2 frames, the selected range has {len(indices)}")

        start = time.time()
        self.initialize([self.load_frame(i) for i in indices[:num_init]])
        for index in tqdm(indices[num_init:], desc="frames"):
            try:
                self.step(self.load_frame(index))
            except Exception as e:
                logger.error(serialize_exception_to_string(e))
                raise FrameError(index, e) from e

        self.finish()
        logger.success(
            f"✅ Processed {len(self.store)} frames, {self.num_keyframes} keyframes in {time.time() - start:.1f}s; final map {self.gmap}"
        )
        return self.store

    def initialize(self, frames: List[FrameBundle]):
        logger.info(f"🚀 Initializing on frames {[f.index for f in frames]}")
        try:
            self.gmap, result = self.mapper.initialize(frames)
        except Exception as e:
            logger.error(serialize_exception_to_string(e))
            raise FrameError(frames[0].index, e) from e
        for frame in frames:
            self.seeder.on_keyframe(frame.index)
            state = self.store[frame.index]
            self.log_frame(state, None, "init")
        self.num_keyframes = len(frames)
        self.log_mapping(result)

    def step(self, frame: FrameBundle) -> TrackingResult:
        result = self.tracker.track_frame(self.gmap, frame)
        decision = result.decision
        if decision.is_keyframe:
            self.num_keyframes += 1
            if self.seeder.on_keyframe(frame.index):
                logger.debug(f"Tracks re-seeded at keyframe {frame.index}")
            mapping = self.mapper.on_keyframe(self.gmap, result.state)
            self.log_mapping(mapping)
            every = self.config.output.snapshot_every
            if every and self.num_keyframes % every == 0:
                save_snapshot(self.gmap, self.path("map", f"kf_{frame.index:06d}.txt"))
        else:
            # only window keyframes need their images again
            result.state.bundle = None
        self.log_frame(result.state, result, decision.reason or "")
        self.dump_channels(frame, result.state)
        return result

    def log_frame(self, state: FrameState, result: Optional[TrackingResult], reason: str):
        t, q = state.pose.translation.tolist(), state.pose.rotation.tolist()
        row = FrameLog(
            frame=state.index,
            timestamp=state.timestamp,
            tx=t[0],
            ty=t[1],
            tz=t[2],
            qx=q[0],
            qy=q[1],
            qz=q[2],
            qw=q[3],
            inlier_ratio=result.inlier_ratio if result else float("nan"),
            pnp_status=result.pnp_status if result else "init",
            refine_loss_start=_value(result.refine_loss_start if result else None),
            refine_loss_end=_value(result.refine_loss_end if result else None),
            deform_loss_start=_value(result.deform_loss_start if result else None),
            deform_loss_end=_value(result.deform_loss_end if result else None),
            num_residuals=len(state.residuals),
            keyframe_reason=reason,
            num_primitives=len(self.gmap),
            active_bases=self.gmap.bases.active_count(),
            duration=result.duration if result else 0.0,
        )
        export_csv(self.path("tracking_log.csv"), [row])
        event = {"event": "frame", **vars(row)}
        if result is not None:
            for e in result.events:
                event.update(e.asdict())
        log_event(self, event)
        if result is not None:
            logger.info(
                f"Frame {state.index}: pnp {result.pnp_status} ({result.inlier_ratio:.2f}), "
                f"refine {row.refine_loss_start:.5f} -> {row.refine_loss_end:.5f}"
                + (f", 🔑 keyframe ({reason})" if reason else "")
            )

    def log_mapping(self, result: MappingResult):
        if result.report is not None:
            export_csv(self.path("management_report.csv"), result.report.rows())
        export_csv(self.path("ba_trace.csv"), result.trace)
        if result.marginalized is not None:
            self.save_residuals(result.marginalized)
            result.marginalized.bundle = None
        log_event(
            self,
            {
                "event": "keyframe",
                "keyframe": result.keyframe,
                "new_primitives": int(len(result.new_primitives)),
                "num_primitives": len(self.gmap),
                "active_bases": self.gmap.bases.active_count(),
                "total_bases": self.gmap.bases.total_count(),
                "ba_loss_start": result.trace[0].total if result.trace else float("nan"),
                "ba_loss_end": result.trace[-1].total if result.trace else float("nan"),
                "mapping_time": result.duration,
            },
        )

    def save_residuals(self, state: FrameState):
        torch.save(state.residuals.state_dict(), self.path("residuals", f"{state.index:06d}.pt"))

    def dump_channels(self, frame: FrameBundle, state: FrameState):
        channels = [c for c in self.config.output.dump_channels if c in DUMPABLE_CHANNELS]
        if not channels:
            return
        with torch.no_grad():
            out = render_frame(self.gmap, state.time, frame.intrinsics, state.pose, state.residuals, channels=set(channels), gate=self.gate)
        write_channels(out, channels, self.path("channels"), state.index)

    def finish(self):
        states = list(self.store)
        write_trajectory(self.path("trajectory.txt"), [s.timestamp for s in states], [s.pose for s in states])
        for state in states:
            self.save_residuals(state)
        save_snapshot(self.gmap, self.path("map", "final.txt"))


def write_channels(out, channels, root: str, index: int):
    """Writes rendered channels as images: rgb as 8-bit color, depth as 16-bit depth, the rest as 8-bit gray."""
    for name in channels:
        os.makedirs(os.path.join(root, name), exist_ok=True)
        path = os.path.join(root, name, f"{index:06d}.png")
        value = out.rgb if name == "rgb" else getattr(out, name)
        if name == "depth":
            write_depth(path, value)
        elif name == "rgb":
            write_image(path, value.clamp(0, 1))
        else:
            write_image(path, value.clamp(0, 1).unsqueeze(-1).expand(-1, -1, 3))


def _value(x: Optional[float]) -> float:
    return float("nan") if x is None or not np.isfinite(x) else float(x)
