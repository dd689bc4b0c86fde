import torch
from loguru import logger

from nrslam.geometry import DTYPE, Pose, backproject
from nrslam.gaussians import ATTRIBUTES, CanonicalMap, logit
from nrslam.gaussians.map import initial_scale
from nrslam.priors import FrameBundle, track_mask

DEFAULT_EXTENT = 0.05


def mean_extent(gmap: CanonicalMap, attribute: str, default: float = DEFAULT_EXTENT) -> float:
    bank = gmap.bases[attribute]
    return float(bank.extent.detach().mean()) if len(bank) else default


def expansion_mask(transmittance: torch.Tensor, frame: FrameBundle, tau: float = 0.1) -> torch.Tensor:
    """Free-space pixels (T >= ``tau``) outside the support of tracks carried over from earlier frames."""
    free = transmittance.detach() >= tau
    if frame.priors is None:
        return free
    tracks = frame.priors.tracks
    carried = tracks.select(tracks.start_frame != frame.index)
    return free & ~track_mask(carried.u, tuple(transmittance.shape))


def extend_map(
    gmap: CanonicalMap,
    frame: FrameBundle,
    pose: Pose,
    transmittance: torch.Tensor,
    stride: int = 4,
    tau: float = 0.1,
    new_prob: float = 0.6,
    opacity: float = 0.9,
    default_extent: float = DEFAULT_EXTENT,
) -> torch.Tensor:
    """Seeds primitives in unexplained free space from the depth prior; returns their indices.

    New primitives start with w_d = ``new_prob`` and one zero-weight basis per attribute centred
    at the frame time, with the mean extent of the attribute's existing bases. Pixels without
    a depth prior are skipped.
    """
    K = frame.intrinsics
    mask = expansion_mask(transmittance, frame, tau)
    sampled = torch.zeros_like(mask)
    sampled[stride // 2 :: stride, stride // 2 :: stride] = True
    mask = mask & sampled
    if frame.priors is not None:
        mask = mask & (frame.priors.depth > 0)
    else:
        mask = torch.zeros_like(mask)
    v, u = torch.nonzero(mask, as_tuple=True)
    if not len(v):
        return torch.zeros(0, dtype=torch.long)

    depth = frame.priors.depth[v, u]
    pixels = torch.stack([u, v], dim=-1).to(DTYPE)
    extents = {attr: mean_extent(gmap, attr, default_extent) for attr in ATTRIBUTES}
    indices = gmap.add_primitives(
        means=backproject(K, pixels, depth, pose.detach()),
        log_scales=initial_scale(depth, K.fx, stride),
        opacity_logits=torch.full((len(v),), float(logit(opacity)), dtype=DTYPE),
        colors=frame.image[v, u],
        def_logits=torch.full((len(v),), float(logit(new_prob)), dtype=DTYPE),
    )
    for attr in ATTRIBUTES:
        gmap.bases[attr].append(indices, frame.time, extents[attr])
    logger.debug(f"Map extension at frame {frame.index}: {len(indices)} new primitives")
    return indices
