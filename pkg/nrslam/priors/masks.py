"""Validity and co-visibility masks."""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay, QhullError, cKDTree

from nrslam.utils.exceptions import TooFewPoints

LUMA = (0.299, 0.587, 0.114)
# absorbs the rounding of the luma sum so that the inclusive bounds hold for exact grays
GRAY_TOLERANCE = 1e-12
HULL_EDGE_FACTOR = 4.0
SEGMENT_RADIUS = 1.0


@dataclass(eq=False)
class MaskSet:
    valid: torch.Tensor
    map_mask: torch.Tensor
    track_mask: torch.Tensor
    covis: torch.Tensor

    def covis_ratio(self) -> float:
        return float(self.covis.to(torch.float64).mean())


def grayscale(image: torch.Tensor) -> torch.Tensor:
    return image[..., 0] * LUMA[0] + image[..., 1] * LUMA[1] + image[..., 2] * LUMA[2]


def validity_mask(image: torch.Tensor, delta: float) -> torch.Tensor:
    if not 0 <= delta < 0.5:
        raise ValueError(f"delta must lie in [0, 0.5), got {delta}")
    gray = grayscale(image)
    return (gray >= delta - GRAY_TOLERANCE) & (gray <= 1 - delta + GRAY_TOLERANCE)


def map_mask(transmittance: torch.Tensor, tau_T: float) -> torch.Tensor:
    return transmittance < tau_T


def covis_mask(map_mask: torch.Tensor, track_mask: torch.Tensor) -> torch.Tensor:
    if map_mask.shape != track_mask.shape:
        raise ValueError(f"Mask shapes differ: {tuple(map_mask.shape)} vs {tuple(track_mask.shape)}")
    return map_mask & track_mask


def _pixel_centers(height: int, width: int) -> np.ndarray:
    v, u = np.mgrid[0:height, 0:width]
    return np.stack([u.ravel(), v.ravel()], axis=-1).astype(np.float64)


def _segment_mask(points: np.ndarray, height: int, width: int) -> np.ndarray:
    """Pixels within SEGMENT_RADIUS of the segment spanned by (nearly) collinear points."""
    centroid = points.mean(0)
    direction = np.linalg.svd(points - centroid)[2][0]
    s = (points - centroid) @ direction
    a, b = centroid + s.min() * direction, centroid + s.max() * direction
    pixels = _pixel_centers(height, width)
    ab = b - a
    denom = max(float(ab @ ab), 1e-12)
    h = np.clip((pixels - a) @ ab / denom, 0.0, 1.0)
    dist = np.linalg.norm(pixels - (a + h[:, None] * ab), axis=-1)
    return (dist <= SEGMENT_RADIUS).reshape(height, width)


def _connected(tri: Delaunay, keep: np.ndarray) -> bool:
    kept = np.flatnonzero(keep)
    lookup = -np.ones(len(keep), dtype=np.int64)
    lookup[kept] = np.arange(len(kept))
    src, dst = [], []
    for s in kept:
        for nb in tri.neighbors[s]:
            if nb >= 0 and keep[nb]:
                src.append(lookup[s])
                dst.append(lookup[nb])
    graph = coo_matrix((np.ones(len(src)), (src, dst)), shape=(len(kept), len(kept)))
    n_components, _ = connected_components(graph, directed=False)
    return n_components == 1


def hull_points(points) -> np.ndarray:
    """Distinct finite track endpoints; a hull needs at least three."""
    pts = np.asarray(torch.as_tensor(points, dtype=torch.float64).detach(), dtype=np.float64).reshape(-1, 2)
    pts = np.unique(pts[np.isfinite(pts).all(axis=1)], axis=0)
    if len(pts) < 3:
        raise TooFewPoints(f"A track hull needs 3 distinct endpoints, got {len(pts)}")
    return pts


def track_mask(points, image_size: Tuple[int, int], edge_factor: float = HULL_EDGE_FACTOR) -> torch.Tensor:
    """Rasterized concave hull (inclusive) of the current-frame track endpoints.

    Triangles of the Delaunay triangulation with an edge longer than ``edge_factor`` times the
    median nearest-neighbour spacing are dropped; if that disconnects the hull, the convex
    hull is used. Fewer than three points give an empty mask.
    """
    height, width = image_size
    try:
        pts = hull_points(points)
    except TooFewPoints:
        return torch.zeros(height, width, dtype=torch.bool)
    try:
        tri = Delaunay(pts)
    except QhullError:
        return torch.from_numpy(_segment_mask(pts, height, width))

    corners = pts[tri.simplices]
    edges = np.linalg.norm(corners - np.roll(corners, 1, axis=1), axis=-1).max(axis=1)
    spacing = np.median(cKDTree(pts).query(pts, k=2)[0][:, 1])
    keep = edges <= edge_factor * spacing
    if not keep.any() or not _connected(tri, keep):
        keep = np.ones(len(tri.simplices), dtype=bool)

    simplex = tri.find_simplex(_pixel_centers(height, width), tol=1e-9)
    inside = (simplex >= 0) & keep[np.maximum(simplex, 0)]
    return torch.from_numpy(inside.reshape(height, width))


def compute_masks(
    image: torch.Tensor,
    transmittance: torch.Tensor,
    track_points: torch.Tensor,
    delta: float,
    tau_T: float,
    use_validity: bool = True,
    use_covis: bool = True,
) -> MaskSet:
    shape = tuple(transmittance.shape)
    valid = validity_mask(image, delta) if use_validity else torch.ones(shape, dtype=torch.bool)
    mmask = map_mask(transmittance, tau_T)
    tmask = track_mask(track_points, shape)
    covis = covis_mask(mmask, tmask) if use_covis else torch.ones(shape, dtype=torch.bool)
    return MaskSet(valid=valid, map_mask=mmask, track_mask=tmask, covis=covis)
