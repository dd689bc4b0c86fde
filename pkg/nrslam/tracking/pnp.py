"""Confidence-weighted PnP with RANSAC for the coarse pose of a new frame."""

import math
from dataclasses import dataclass
from typing import Tuple

import cv2
import numpy as np
import torch
from loguru import logger
from scipy.optimize import least_squares

from nrslam.geometry import Intrinsics, Pose, backproject
from nrslam.objectives.geometric import MIN_COVERAGE, in_image, sample_bilinear
from nrslam.priors import Tracks
from nrslam.renderer import RenderOutput
from nrslam.utils.exceptions import DegenerateGeometry

MIN_CORRESPONDENCES = 6


@dataclass(eq=False)
class Correspondences:
    """World points of (mostly rigid) tracked pixels and where they are observed now."""

    world: np.ndarray
    pixels: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return int(self.world.shape[0])

    def __add__(self, other: "Correspondences") -> "Correspondences":
        return Correspondences(
            np.concatenate([self.world, other.world]),
            np.concatenate([self.pixels, other.pixels]),
            np.concatenate([self.weights, other.weights]),
        )

    @classmethod
    def empty(cls) -> "Correspondences":
        return cls(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0))


def build_correspondences(anchor: RenderOutput, tracks: Tracks, K: Intrinsics, anchor_pose: Pose, tau_def: float) -> Correspondences:
    """Keeps tracks whose anchor-view confidence is below ``tau_def`` and lifts them with the anchor depth.

    Each correspondence is weighted by (1 - confidence)^2.
    """
    if not len(tracks):
        return Correspondences.empty()
    with torch.no_grad():
        keep = in_image(tracks.u0, K) & in_image(tracks.u, K)
        tracks = tracks.select(keep)
        if not len(tracks):
            return Correspondences.empty()
        confidence = sample_bilinear(anchor.confidence, tracks.u0).clamp(0, 1)
        coverage = sample_bilinear(1 - anchor.transmittance, tracks.u0)
        depth = sample_bilinear(anchor.depth / (1 - anchor.transmittance).clamp(min=1e-6), tracks.u0)
        keep = (confidence < tau_def) & (coverage > MIN_COVERAGE) & (depth > 0)
        if not bool(keep.any()):
            return Correspondences.empty()
        world = backproject(K, tracks.u0[keep], depth[keep], anchor_pose)
    return Correspondences(
        world=world.numpy(),
        pixels=tracks.u[keep].numpy(),
        weights=((1 - confidence[keep]) ** 2).numpy(),
    )


def _camera_matrix(K: Intrinsics) -> np.ndarray:
    return np.array([[K.fx, 0.0, K.cx], [0.0, K.fy, K.cy], [0.0, 0.0, 1.0]])


def _reprojection_errors(world, pixels, rvec, tvec, camera) -> np.ndarray:
    projected, _ = cv2.projectPoints(world, rvec, tvec, camera, None)
    return np.linalg.norm(projected.reshape(-1, 2) - pixels, axis=1)


def _to_pose(rvec: np.ndarray, tvec: np.ndarray) -> Pose:
    """OpenCV's world-to-camera (rvec, tvec) as a camera-to-world pose."""
    rotation, _ = cv2.Rodrigues(rvec)
    world_to_camera = np.eye(4)
    world_to_camera[:3, :3] = rotation
    world_to_camera[:3, 3] = tvec.reshape(3)
    return Pose.from_matrix(np.linalg.inv(world_to_camera))


def _from_pose(pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
    world_to_camera = pose.inverse().as_matrix().detach().numpy()
    rvec, _ = cv2.Rodrigues(world_to_camera[:3, :3])
    return rvec.reshape(3), world_to_camera[:3, 3].copy()


def weighted_pnp(
    corr: Correspondences,
    K: Intrinsics,
    rng: np.random.Generator,
    threshold: float = 2.0,
    max_iters: int = 500,
    confidence: float = 0.99,
    initial: Pose = None,
) -> Tuple[Pose, np.ndarray]:
    """EPnP inside RANSAC scored by the weighted inlier sum, then a weighted robust refit on the inliers.

    Returns the camera-to-world pose and the inlier mask.
    """
    n = len(corr)
    if n < MIN_CORRESPONDENCES:
        raise DegenerateGeometry(f"{n} correspondences, at least {MIN_CORRESPONDENCES} needed")
    camera = _camera_matrix(K)
    world = np.ascontiguousarray(corr.world, dtype=np.float64)
    pixels = np.ascontiguousarray(corr.pixels, dtype=np.float64)

    best_score, best = -1.0, None
    iters, needed = 0, max_iters
    while iters < min(max_iters, needed):
        iters += 1
        sample = rng.choice(n, MIN_CORRESPONDENCES, replace=False)
        ok, rvec, tvec = cv2.solvePnP(world[sample], pixels[sample], camera, None, flags=cv2.SOLVEPNP_EPNP)
        if not ok or not np.all(np.isfinite(rvec)) or not np.all(np.isfinite(tvec)):
            continue
        inliers = _reprojection_errors(world, pixels, rvec, tvec, camera) < threshold
        score = float(corr.weights[inliers].sum())
        if score > best_score:
            best_score, best = score, (rvec.reshape(3), tvec.reshape(3), inliers)
            ratio = inliers.mean()
            if ratio >= 1.0:
                needed = 0
            elif ratio > 0:
                needed = math.log(1 - confidence) / math.log(1 - ratio**MIN_CORRESPONDENCES)

    if best is None or best[2].sum() < MIN_CORRESPONDENCES:
        if initial is None:
            raise DegenerateGeometry("RANSAC found no consensus")
        rvec, tvec = _from_pose(initial)
        inliers = _reprojection_errors(world, pixels, rvec, tvec, camera) < threshold
        if inliers.sum() < MIN_CORRESPONDENCES:
            raise DegenerateGeometry("RANSAC found no consensus")
    else:
        rvec, tvec, inliers = best

    # unit mean weights: the soft-L1 knee stays at `threshold` pixels
    weights = corr.weights[inliers]
    sqrt_w = np.sqrt(weights / weights.mean())[:, None]

    def residuals(x):
        projected, _ = cv2.projectPoints(world[inliers], x[:3], x[3:], camera, None)
        return (sqrt_w * (projected.reshape(-1, 2) - pixels[inliers])).reshape(-1)

    fit = least_squares(residuals, np.concatenate([rvec, tvec]), loss="soft_l1", f_scale=threshold)
    rvec, tvec = fit.x[:3], fit.x[3:]
    inliers = _reprojection_errors(world, pixels, rvec, tvec, camera) < threshold
    logger.debug(f"PnP: {iters} iterations, {int(inliers.sum())}/{n} inliers")
    return _to_pose(rvec, tvec), inliers


def coarse_pose(
    corr: Correspondences,
    K: Intrinsics,
    rng: np.random.Generator,
    prediction: Pose,
    threshold: float = 2.0,
    max_iters: int = 500,
    confidence: float = 0.99,
) -> Tuple[Pose, float, str]:
    """Coarse pose, inlier ratio and status; falls back to ``prediction`` on degenerate geometry."""
    try:
        pose, inliers = weighted_pnp(corr, K, rng, threshold, max_iters, confidence, initial=prediction)
    except DegenerateGeometry as e:
        logger.warning(f"PnP fell back to the constant-velocity prediction: {e}")
        return prediction, 0.0, "fallback"
    return pose, float(inliers.mean()), "ok"
