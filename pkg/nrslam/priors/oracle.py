from dataclasses import dataclass

import numpy as np
import torch

from nrslam.geometry import DTYPE
from nrslam.priors.base import FrameBundle, Priors, PriorProvider, Tracks
from nrslam.utils.misc import frame_rng


@dataclass
class PriorNoise:
    """Gaussian corruption applied to ground-truth priors: multiplicative on depth, additive on tracks."""

    depth: float = 0.0
    track_px: float = 0.0
    track_mm: float = 0.0

    def __post_init__(self):
        for name in ("depth", "track_px", "track_mm"):
            if getattr(self, name) < 0:
                raise ValueError(f"Noise level {name} must be non-negative, got {getattr(self, name)}")

    @property
    def is_zero(self) -> bool:
        return self.depth == 0 and self.track_px == 0 and self.track_mm == 0


def perturb_priors(priors: Priors, noise: PriorNoise, rng: np.random.Generator) -> Priors:
    """Returns a noisy copy of ``priors``; with zero noise the input is returned untouched."""
    if noise.is_zero:
        return priors

    def gaussian(shape, sigma):
        return torch.from_numpy(rng.standard_normal(shape)).to(DTYPE) * sigma

    depth = priors.depth
    if noise.depth > 0:
        valid = depth > 0
        depth = torch.where(valid, (depth * (1 + gaussian(tuple(depth.shape), noise.depth))).clamp(min=1e-3), depth)

    tracks = priors.tracks
    n = len(tracks)
    if n and (noise.track_px > 0 or noise.track_mm > 0):
        tracks = Tracks(
            ids=tracks.ids,
            start_frame=tracks.start_frame,
            u0=tracks.u0,
            u=tracks.u + gaussian((n, 2), noise.track_px),
            x0=tracks.x0,
            x=tracks.x + gaussian((n, 3), noise.track_mm),
        )
    return Priors(depth=depth, tracks=tracks, stats=dict(priors.stats))


class OraclePriorProvider(PriorProvider):
    """Priors read straight from simulator ground truth, optionally corrupted by ``noise``.

    ``ground_truth`` needs a ``priors(frame_index, anchor)`` method returning noise-free Priors.
    Noise for a frame comes from its own generator, so results do not depend on fetch order.
    """

    def __init__(self, ground_truth, noise: PriorNoise = None, seed: int = 0, **kwargs):
        self.ground_truth = ground_truth
        self.noise = noise or PriorNoise()
        self.seed = seed

    name = "oracle"

    def fetch(self, frame: FrameBundle, anchor: int) -> Priors:
        priors = self.ground_truth.priors(frame.index, min(anchor, frame.index))
        return perturb_priors(priors, self.noise, frame_rng(self.seed, frame.index, anchor))
