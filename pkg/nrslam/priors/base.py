import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Optional

import torch

from nrslam.geometry import DTYPE, Intrinsics
from nrslam.utils.exceptions import ShapeMismatch


@dataclass(eq=False)
class Tracks:
    """Point trajectories from a start (anchor) frame to the current frame, 2D and 3D index-aligned.

    3D points are expressed in the camera frame of their own frame: ``x0`` in the start
    frame's camera, ``x`` in the current frame's camera.
    """

    ids: torch.Tensor
    start_frame: torch.Tensor
    u0: torch.Tensor
    u: torch.Tensor
    x0: torch.Tensor
    x: torch.Tensor

    def __post_init__(self):
        n = self.ids.shape[0]
        for name in ("start_frame", "u0", "u", "x0", "x"):
            if getattr(self, name).shape[0] != n:
                raise ShapeMismatch(f"Track field {name} has {getattr(self, name).shape[0]} rows, expected {n}")

    def __len__(self):
        return int(self.ids.shape[0])

    @classmethod
    def empty(cls) -> "Tracks":
        z2, z3 = torch.zeros(0, 2, dtype=DTYPE), torch.zeros(0, 3, dtype=DTYPE)
        return cls(torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long), z2, z2.clone(), z3, z3.clone())

    def select(self, mask: torch.Tensor) -> "Tracks":
        return Tracks(self.ids[mask], self.start_frame[mask], self.u0[mask], self.u[mask], self.x0[mask], self.x[mask])

    def anchors(self):
        return sorted(set(self.start_frame.tolist()))


@dataclass(eq=False)
class Priors:
    depth: torch.Tensor
    tracks: Tracks
    stats: dict = field(default_factory=dict)

    @property
    def tracks2d(self):
        return self.tracks.start_frame, self.tracks.u0, self.tracks.u

    @property
    def tracks3d(self):
        return self.tracks.start_frame, self.tracks.x0, self.tracks.x


@dataclass(eq=False)
class FrameBundle:
    index: int
    time: float
    timestamp: float
    image: torch.Tensor
    intrinsics: Intrinsics
    priors: Optional[Priors] = None
    masks: Optional["MaskSet"] = None  # noqa: F821

    @property
    def shape(self):
        return self.intrinsics.shape


class TrackSeeder:
    """Anchor frame for new tracks: re-seeded on every ``buffer_size``-th keyframe."""

    def __init__(self, buffer_size: int = 3, first_anchor: int = 0):
        self.buffer_size = buffer_size
        self.anchor = first_anchor
        self.keyframes_seen = 0

    def on_keyframe(self, frame_index: int) -> bool:
        self.keyframes_seen += 1
        if self.keyframes_seen % self.buffer_size == 0:
            self.anchor = frame_index
            return True
        return False


class PriorProvider(ABC):
    """Source of depth and track priors for a frame."""

    name: str = None

    @abstractmethod
    def fetch(self, frame: FrameBundle, anchor: int) -> Priors:
        ...

    def next(self, frame: FrameBundle, anchor: int) -> Priors:
        t0 = time.time()
        priors = self.fetch(frame, anchor)
        if tuple(priors.depth.shape) != tuple(frame.shape):
            raise ShapeMismatch(
                f"{self.name} depth prior has shape {tuple(priors.depth.shape)}, frame is {tuple(frame.shape)}"
            )
        priors.stats = {
            "source": self.name,
            "fetch_time": time.time() - t0,
            "num_tracks": len(priors.tracks),
            "anchor": anchor,
        }
        return priors

    def __repr__(self):
        return f"{self.__class__.__name__}(name={self.name})"


def acquire_priors(frame: FrameBundle, source: PriorProvider, anchor: Optional[int] = None) -> Priors:
    """Priors for ``frame`` from ``source``; ``anchor`` is the start frame requested for new tracks."""
    return source.next(frame, frame.index if anchor is None else anchor)
