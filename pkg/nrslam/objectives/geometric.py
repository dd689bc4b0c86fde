"""Annealed, IRLS-weighted geometric consistency against depth and track priors."""

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F

from nrslam.geometry import DTYPE, PROJECTION_MIN_Z, Intrinsics, Pose, backproject
from nrslam.objectives.base import BaseObjective, LossContext, LossOutput, TrackPrediction
from nrslam.priors import MaskSet, Priors, Tracks
from nrslam.renderer import RenderOutput

HUBER_SCALE = 1.345
HUBER_FLOOR = 1e-3
IRLS_EPS = 1e-6
MIN_COVERAGE = 0.5
TERMS = ("depth", "traj2d", "traj3d")
PENALTIES = ("huber",)


@dataclass
class AnnealSchedule:
    lambda0: float = 1.0
    lambda_min: float = 0.01
    tau: float = 10.0

    def __post_init__(self):
        if self.lambda0 < 0 or self.lambda_min < 0:
            raise ValueError(f"Annealing weights must be non-negative, got {self.lambda0}, {self.lambda_min}")
        if self.tau <= 0:
            raise ValueError(f"Annealing time constant must be positive, got {self.tau}")


def anneal_weight(k: int, schedule: AnnealSchedule) -> float:
    """lambda(k) = lambda0 * exp(-k / tau) + lambda_min."""
    if k < 0:
        raise ValueError(f"Iteration must be non-negative, got {k}")
    return schedule.lambda0 * math.exp(-k / schedule.tau) + schedule.lambda_min


@dataclass
class RobustPenalty:
    kind: str = "huber"
    threshold: float = 1.0

    def __post_init__(self):
        if self.kind not in PENALTIES:
            raise ValueError(f"Penalty {self.kind!r} not supported. Please choose from {PENALTIES}")
        if self.threshold < 0:
            raise ValueError(f"Penalty threshold must be non-negative, got {self.threshold}")

    @classmethod
    def from_residuals(cls, residuals: torch.Tensor, scale: float = HUBER_SCALE, floor: float = HUBER_FLOOR) -> "RobustPenalty":
        """Huber threshold at ``scale`` times the median absolute residual."""
        if residuals.numel() == 0:
            return cls(threshold=floor)
        return cls(threshold=max(scale * float(residuals.detach().abs().median()), floor))

    def rho(self, r: torch.Tensor) -> torch.Tensor:
        d = self.threshold
        return torch.where(r <= d, 0.5 * r**2, d * (r - 0.5 * d))

    def rho_prime(self, r: torch.Tensor) -> torch.Tensor:
        return torch.where(r <= self.threshold, r, torch.full_like(r, self.threshold))


def irls_weight(r, penalty: RobustPenalty, eps: float = IRLS_EPS) -> torch.Tensor:
    """gamma = rho'(r) / (r + eps)."""
    r = torch.as_tensor(r, dtype=DTYPE)
    if bool((r < 0).any()):
        raise ValueError("Residual magnitudes must be non-negative")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    return penalty.rho_prime(r) / (r + eps)


def irls_term(
    squared: torch.Tensor,
    weights: Optional[torch.Tensor] = None,
    penalty: Optional[RobustPenalty] = None,
    robust: bool = True,
    eps: float = IRLS_EPS,
) -> torch.Tensor:
    """Mean over entries with positive weight of weight * 1/2 * gamma * r^2.

    ``squared`` holds r^2; gamma is computed from the detached residuals so it stays fixed for
    the step. Without ``penalty`` the Huber threshold follows the median residual.
    """
    if weights is None:
        weights = torch.ones_like(squared)
    active = weights.detach() > 0
    if not bool(active.any()):
        return (squared * 0.0).sum()
    r = torch.sqrt(squared.detach().clamp(min=0))
    if robust:
        penalty = penalty or RobustPenalty.from_residuals(r[active])
        gamma = irls_weight(r, penalty, eps)
    else:
        gamma = torch.ones_like(r)
    return (weights * 0.5 * gamma * squared).sum() / active.sum()


def sample_bilinear(image: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
    """Samples an (H, W) or (H, W, C) image at (n, 2) pixel coordinates (u, v)."""
    squeeze = image.dim() == 2
    channels = image.unsqueeze(-1) if squeeze else image
    H, W = channels.shape[:2]
    grid = torch.stack(
        [2 * pixels[:, 0] / max(W - 1, 1) - 1, 2 * pixels[:, 1] / max(H - 1, 1) - 1],
        dim=-1,
    ).reshape(1, 1, -1, 2)
    sampled = F.grid_sample(
        channels.permute(2, 0, 1).unsqueeze(0),
        grid.to(channels.dtype),
        mode="bilinear",
        padding_mode="border",
        align_corners=True,
    )
    sampled = sampled[0, :, 0, :].transpose(0, 1)
    return sampled[:, 0] if squeeze else sampled


def in_image(pixels: torch.Tensor, K: Intrinsics) -> torch.Tensor:
    u, v = pixels[:, 0], pixels[:, 1]
    return (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)


def predict_tracks(
    anchor: RenderOutput,
    tracks: Tracks,
    K: Intrinsics,
    anchor_pose: Pose,
    confidence: Optional[torch.Tensor] = None,
) -> TrackPrediction:
    """World positions of tracked points at the current frame as the map predicts them.

    Each start pixel is lifted with the anchor view's rendered depth and moved by the anchor
    render's traj3d channel. With ``confidence`` (the current frame's confidence map) each
    track is weighted by one minus the confidence at its current pixel.
    """
    if not len(tracks) or anchor.traj3d is None:
        return TrackPrediction.empty()
    keep = in_image(tracks.u0, K) & in_image(tracks.u, K)
    coverage = sample_bilinear(1 - anchor.transmittance.detach(), tracks.u0)
    keep = keep & (coverage > MIN_COVERAGE)
    tracks = tracks.select(keep)
    if not len(tracks):
        return TrackPrediction.empty()

    expected_depth = anchor.depth / (1 - anchor.transmittance).clamp(min=1e-6)
    depth = sample_bilinear(expected_depth, tracks.u0)
    positive = depth.detach() > 0
    tracks, depth = tracks.select(positive), depth[positive]
    if not len(tracks):
        return TrackPrediction.empty()
    world = backproject(K, tracks.u0, depth, anchor_pose) + sample_bilinear(anchor.traj3d, tracks.u0)

    weight = torch.ones(len(tracks), dtype=DTYPE)
    if confidence is not None:
        weight = 1 - sample_bilinear(confidence.detach(), tracks.u).clamp(0, 1)
    return TrackPrediction(world=world, observed_cam=tracks.x, observed_px=tracks.u, weight=weight)


def geometric_terms(
    render: RenderOutput,
    priors: Optional[Priors],
    masks: Optional[MaskSet],
    tracks: Optional[TrackPrediction],
    pose: Pose,
    K: Intrinsics,
    pixel_weight: Optional[torch.Tensor] = None,
) -> Dict[str, Tuple[torch.Tensor, torch.Tensor]]:
    """Squared residuals and weights of every geometric term."""
    terms = {}
    if priors is not None:
        mask = priors.depth > 0
        if masks is not None:
            mask = mask & masks.valid & masks.covis
        weight = mask.to(DTYPE) if pixel_weight is None else mask.to(DTYPE) * pixel_weight
        terms["depth"] = (((render.depth - priors.depth) ** 2).reshape(-1), weight.reshape(-1))

    if tracks is not None and len(tracks):
        cam = pose.inverse().transform(tracks.world)
        terms["traj3d"] = (((cam - tracks.observed_cam) ** 2).sum(-1), tracks.weight)
        z = cam[:, 2]
        front = z.detach() > PROJECTION_MIN_Z
        z = torch.where(front, z, torch.ones_like(z))
        uv = torch.stack([K.fx * cam[:, 0] / z + K.cx, K.fy * cam[:, 1] / z + K.cy], dim=-1)
        terms["traj2d"] = (((uv - tracks.observed_px) ** 2).sum(-1), tracks.weight * front.to(DTYPE))
    return terms


def geometric_loss(
    terms: Dict[str, Tuple[torch.Tensor, torch.Tensor]],
    k: int,
    schedule: AnnealSchedule,
    term_weights: Optional[Dict[str, float]] = None,
    robust: bool = True,
    penalty: Optional[RobustPenalty] = None,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """sum_g lambda_g(k) * L_g with L_g the IRLS-weighted mean of 1/2 * gamma * r^2."""
    lam = anneal_weight(k, schedule)
    total = torch.zeros((), dtype=DTYPE)
    info = {"lambda": lam}
    for name, (squared, weights) in terms.items():
        scale = 1.0 if term_weights is None else term_weights.get(name, 1.0)
        value = irls_term(squared, weights, penalty, robust)
        info[name] = float(value.detach())
        total = total + lam * scale * value
    return total, info


class GeometricObjective(BaseObjective):
    @property
    def name(self) -> str:
        return "geometric"

    def __init__(
        self,
        lambda0: float = 1.0,
        lambda_min: float = 0.01,
        tau: float = 10.0,
        robust: bool = True,
        huber_threshold: float = 0.0,
        depth_weight: float = 1.0,
        traj2d_weight: float = 1.0,
        traj3d_weight: float = 1.0,
        **kwargs,
    ):
        self.schedule = AnnealSchedule(lambda0, lambda_min, tau)
        self.robust = robust
        # 0 selects the median-based threshold per term and iteration
        self.penalty = RobustPenalty(threshold=huber_threshold) if huber_threshold > 0 else None
        self.term_weights = {"depth": depth_weight, "traj2d": traj2d_weight, "traj3d": traj3d_weight}

    def loss(self, context: LossContext) -> LossOutput:
        terms = geometric_terms(
            context.render,
            context.priors,
            context.masks,
            context.tracks,
            context.pose,
            context.intrinsics,
            context.pixel_weight,
        )
        loss, info = geometric_loss(terms, context.iteration, self.schedule, self.term_weights, self.robust, self.penalty)
        return LossOutput(loss=loss, extra_info=info)


class DepthL1Objective(BaseObjective):
    """Mean absolute difference between rendered and prior depth over pixels with a prior."""

    @property
    def name(self) -> str:
        return "depth_l1"

    def __init__(self, **kwargs):
        pass

    def loss(self, context: LossContext) -> LossOutput:
        if context.priors is None:
            return LossOutput(loss=torch.zeros((), dtype=DTYPE))
        mask = context.priors.depth > 0
        if not bool(mask.any()):
            return LossOutput(loss=(context.render.depth * 0.0).sum())
        return LossOutput(loss=(context.render.depth[mask] - context.priors.depth[mask]).abs().mean())
