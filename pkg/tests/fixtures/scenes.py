import math
from typing import Dict, Optional

import torch

from nrslam.geometry import DTYPE, Intrinsics
from nrslam.gaussians import CanonicalMap, logit
from nrslam.priors import FrameBundle, Priors, Tracks
from nrslam.simulator import SceneSpec
from nrslam.utils.config import Config, add_args, config

# Small enough to render in milliseconds, large enough for PnP and hull masks.
TINY_SPEC = dict(
    grid=16,
    extent_x=72.0,
    extent_y=56.0,
    depth=50.0,
    relief=1.0,
    deform_region="right",
    amplitude=2.0,
    spatial_frequency=0.05,
    temporal_frequency=0.05,
    trajectory="arc",
    arc_length=4.0,
    frames=8,
    width=32,
    height=24,
    fx=30.0,
    fy=30.0,
    track_grid=4,
    track_reseed=4,
)

FAST_RUN = {
    "logging.dont_save_events": True,
    "init.frames": 3,
    "init.fit_iters": 5,
    "init.pose_iters": 3,
    "init.num_bases": 3,
    "tracking.refine_iters": 3,
    "tracking.deform_iters": 3,
    "tracking.pnp_iters": 50,
    "mapping.window": 3,
    "mapping.pose_iters": 2,
    "mapping.ba_iters": 4,
    "mapping.responsibility_every": 2,
    "mapping.management_at": 2,
    "keyframe.interval": 2,
}


def tiny_spec(**overrides) -> SceneSpec:
    return SceneSpec(**{**TINY_SPEC, **overrides})


def make_config(full_path: str = ".", overrides: Optional[Dict[str, object]] = None) -> Config:
    """Default run configuration with fast iteration counts; ``overrides`` uses dotted keys."""
    cfg = config([], add_args)
    for key, value in {**FAST_RUN, **(overrides or {})}.items():
        *parents, leaf = key.split(".")
        node = cfg
        for part in parents:
            node = getattr(node, part)
        setattr(node, leaf, value)
    cfg.full_path = full_path
    return cfg


def small_intrinsics(width: int = 16, height: int = 12, focal: float = 20.0) -> Intrinsics:
    return Intrinsics(focal, focal, (width - 1) / 2, (height - 1) / 2, width, height)


def plane_map(intrinsics: Intrinsics, depth: float = 40.0, step: int = 2, def_prob: float = 0.3, seed: int = 0) -> CanonicalMap:
    """Fronto-parallel layer of primitives filling the view of an identity camera."""
    generator = torch.Generator().manual_seed(seed)
    v, u = torch.meshgrid(
        torch.arange(0, intrinsics.height, step, dtype=DTYPE),
        torch.arange(0, intrinsics.width, step, dtype=DTYPE),
        indexing="ij",
    )
    u, v = u.reshape(-1), v.reshape(-1)
    n = len(u)
    means = torch.stack([(u - intrinsics.cx) / intrinsics.fx * depth, (v - intrinsics.cy) / intrinsics.fy * depth, torch.full((n,), depth, dtype=DTYPE)], dim=-1)
    gmap = CanonicalMap()
    gmap.add_primitives(
        means=means,
        log_scales=torch.full((n, 3), math.log(0.6 * step * depth / intrinsics.fx), dtype=DTYPE),
        opacity_logits=torch.full((n,), float(logit(0.9)), dtype=DTYPE),
        colors=torch.rand(n, 3, generator=generator, dtype=DTYPE),
        def_logits=torch.full((n,), float(logit(def_prob)), dtype=DTYPE),
    )
    return gmap


def plane_frame(intrinsics: Intrinsics, image: torch.Tensor, depth: float = 40.0, index: int = 0, time: float = 0.0) -> FrameBundle:
    return FrameBundle(
        index=index,
        time=time,
        timestamp=float(index),
        image=image,
        intrinsics=intrinsics,
        priors=Priors(depth=torch.full(intrinsics.shape, depth, dtype=DTYPE), tracks=Tracks.empty()),
    )
