"""Bayesian estimate of each primitive's probability of following the deformable motion mode.

Every window keyframe is rendered twice: with all deformation switched off (rigid hypothesis)
and with all deformation fully applied (deformable hypothesis). Per-pixel photometric errors
are attributed to primitives through the blend weights of the keyframe's regular render and
turned into log-odds, which are averaged over the window with a temporal decay.
"""

import math
from dataclasses import dataclass
from typing import Iterable

import torch

from nrslam.geometry import DTYPE, as_tensor
from nrslam.gaussians import CanonicalMap
from nrslam.renderer import render_frame
from nrslam.tracking.state import FrameState

RIGID_GATE = 0.0
DEFORMABLE_GATE = 1.0


@dataclass(eq=False)
class HypothesisStats:
    """Per keyframe (rows) and primitive (columns): rigid error, deformable error and visibility."""

    times: torch.Tensor
    rigid_error: torch.Tensor
    deform_error: torch.Tensor
    visibility: torch.Tensor

    def __post_init__(self):
        shape = tuple(self.rigid_error.shape)
        if tuple(self.deform_error.shape) != shape or tuple(self.visibility.shape) != shape:
            raise ValueError("Hypothesis statistics must share one (keyframes, primitives) shape")
        if self.times.shape[0] != shape[0]:
            raise ValueError(f"{self.times.shape[0]} keyframe times for {shape[0]} rows")
        for name in ("rigid_error", "deform_error", "visibility"):
            if bool((getattr(self, name) < 0).any()):
                raise ValueError(f"{name} must be non-negative")

    @property
    def num_primitives(self) -> int:
        return int(self.rigid_error.shape[1])


def hypothesis_residual(rendered: torch.Tensor, observed: torch.Tensor, valid: torch.Tensor = None) -> torch.Tensor:
    """Per-pixel L1 norm of the RGB error, zero outside ``valid``."""
    error = (rendered - observed).abs().sum(-1)
    return error if valid is None else error * valid.to(DTYPE)


@torch.no_grad()
def dual_hypothesis_stats(gmap: CanonicalMap, keyframes: Iterable[FrameState], gate=None) -> HypothesisStats:
    """Rigid and deformable energies and visibility of every primitive in every keyframe.

    The deformable hypothesis includes each keyframe's per-frame residuals.
    """
    times, rigid, deformable, visibility = [], [], [], []
    for entry in keyframes:
        frame = entry.bundle
        K = frame.intrinsics
        valid = None if frame.masks is None else frame.masks.valid
        reference = render_frame(gmap, entry.time, K, entry.pose, entry.residuals, channels={"rgb"}, gate=gate)
        rigid_render = render_frame(gmap, entry.time, K, entry.pose, None, channels={"rgb"}, gate=RIGID_GATE)
        deform_render = render_frame(gmap, entry.time, K, entry.pose, entry.residuals, channels={"rgb"}, gate=DEFORMABLE_GATE)
        contributors = reference.contributors
        times.append(entry.time)
        rigid.append(contributors.accumulate(hypothesis_residual(rigid_render.rgb, frame.image, valid)))
        deformable.append(contributors.accumulate(hypothesis_residual(deform_render.rgb, frame.image, valid)))
        visibility.append(contributors.accumulate(None if valid is None else valid.to(DTYPE)))
    n = len(gmap)
    if not times:
        z = torch.zeros(0, n, dtype=DTYPE)
        return HypothesisStats(torch.zeros(0, dtype=DTYPE), z, z.clone(), z.clone())
    return HypothesisStats(as_tensor(times), torch.stack(rigid), torch.stack(deformable), torch.stack(visibility))


def prior_log_odds(pi_d: float) -> float:
    if not 0 < pi_d < 1:
        raise ValueError(f"Deformable prior must be in (0, 1), got {pi_d}")
    return math.log(pi_d / (1 - pi_d))


def posterior_responsibility(E_R, E_D, pi_d: float = 0.5, beta: float = 200.0) -> torch.Tensor:
    """w* = sigmoid(ln(pi_d / pi_r) + beta * (E_R - E_D))."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    return torch.sigmoid(prior_log_odds(pi_d) + beta * (as_tensor(E_R) - as_tensor(E_D)))


def posterior_bayes(E_R, E_D, pi_d: float = 0.5, beta: float = 200.0) -> torch.Tensor:
    """The same posterior as the quotient pi_d p_D / (pi_d p_D + pi_r p_R) of Boltzmann likelihoods."""
    E_R, E_D = as_tensor(E_R), as_tensor(E_D)
    shift = torch.minimum(E_R, E_D)
    p_D = pi_d * torch.exp(-beta * (E_D - shift))
    p_R = (1 - pi_d) * torch.exp(-beta * (E_R - shift))
    return p_D / (p_D + p_R)


def aggregate_responsibility(
    stats: HypothesisStats,
    t: float,
    beta: float = 200.0,
    eta: float = 40.0,
    eps: float = 1e-6,
    pi_d: float = 0.5,
) -> torch.Tensor:
    """sigmoid of the decay- and visibility-weighted mean log-odds over the window.

    gamma_{i,k} = exp(-eta (t - t_k)) v_{i,k}; primitives never seen get 0.5.
    """
    if eta < 0 or eps < 0:
        raise ValueError(f"eta and eps must be non-negative, got {eta}, {eps}")
    if stats.rigid_error.shape[0] == 0:
        return torch.full((stats.num_primitives,), 0.5, dtype=DTYPE)
    log_odds = prior_log_odds(pi_d) + beta * (stats.rigid_error - stats.deform_error)
    gamma = torch.exp(-eta * (t - stats.times)).unsqueeze(-1) * stats.visibility
    denominator = gamma.sum(0) + eps
    mean = torch.where(denominator > 0, (gamma * log_odds).sum(0) / denominator.clamp(min=1e-300), torch.zeros_like(denominator))
    return torch.sigmoid(mean)


def estimate_responsibility(gmap: CanonicalMap, keyframes: Iterable[FrameState], t: float, config, gate=None) -> torch.Tensor:
    mapping = config.mapping
    stats = dual_hypothesis_stats(gmap, keyframes, gate)
    return aggregate_responsibility(stats, t, mapping.beta, mapping.eta, mapping.eps, mapping.prior_deform)
