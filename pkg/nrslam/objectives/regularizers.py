from typing import Dict, Optional

import torch

from nrslam.geometry import DTYPE, as_tensor
from nrslam.gaussians import CanonicalMap, FrameResiduals
from nrslam.objectives.base import BaseObjective, LossContext, LossOutput
from nrslam.utils.exceptions import ShapeMismatch

PROB_CLAMP = 1e-6


def bce_loss(w, w_star) -> torch.Tensor:
    """-[w* ln w + (1 - w*) ln(1 - w)], summed over primitives, w clamped to [1e-6, 1 - 1e-6]."""
    w = as_tensor(w).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    w_star = as_tensor(w_star).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -(w_star * torch.log(w) + (1 - w_star) * torch.log1p(-w)).sum()


def temporal_probability_loss(w: torch.Tensor, w_previous: torch.Tensor) -> torch.Tensor:
    if w.shape != w_previous.shape:
        raise ShapeMismatch(f"{len(w_previous)} previous probabilities for {len(w)} primitives")
    return ((w - w_previous) ** 2).sum()


def spatial_probability_loss(w: torch.Tensor, edges: torch.Tensor) -> torch.Tensor:
    """sum_i sum_{j in N(i)} (w_i - w_j)^2 over the symmetric neighbour edges."""
    if edges.numel() == 0:
        return torch.zeros((), dtype=DTYPE)
    return ((w[edges[0]] - w[edges[1]]) ** 2).sum()


def smoothness_regularizers(
    gmap: CanonicalMap,
    previous_w: Optional[torch.Tensor] = None,
    residuals: Optional[FrameResiduals] = None,
    previous_residuals: Optional[FrameResiduals] = None,
) -> Dict[str, torch.Tensor]:
    """All smoothness terms: probabilities over time and space, residual magnitude and change."""
    w = torch.sigmoid(gmap.def_logits)
    zero = torch.zeros((), dtype=DTYPE)
    terms = {
        "temporal": zero if previous_w is None else temporal_probability_loss(w, previous_w),
        "spatial": spatial_probability_loss(w, gmap.neighbor_edges),
        "residual_reg": zero,
        "residual_temporal": zero,
    }
    if residuals is not None:
        terms["residual_reg"] = residuals.squared_norm()
        terms["residual_temporal"] = residuals.squared_difference(previous_residuals)
    return terms


class BCEObjective(BaseObjective):
    @property
    def name(self) -> str:
        return "bce"

    def __init__(self, **kwargs):
        pass

    def loss(self, context: LossContext) -> LossOutput:
        if context.target_probs is None:
            return LossOutput(loss=torch.zeros((), dtype=DTYPE))
        return LossOutput(loss=bce_loss(torch.sigmoid(context.gmap.def_logits), context.target_probs))


class TemporalSmoothnessObjective(BaseObjective):
    @property
    def name(self) -> str:
        return "temporal"

    def __init__(self, **kwargs):
        pass

    def loss(self, context: LossContext) -> LossOutput:
        if context.previous_def_probs is None:
            return LossOutput(loss=torch.zeros((), dtype=DTYPE))
        w = torch.sigmoid(context.gmap.def_logits)
        return LossOutput(loss=temporal_probability_loss(w, context.previous_def_probs))


class SpatialSmoothnessObjective(BaseObjective):
    @property
    def name(self) -> str:
        return "spatial"

    def __init__(self, **kwargs):
        pass

    def loss(self, context: LossContext) -> LossOutput:
        w = torch.sigmoid(context.gmap.def_logits)
        return LossOutput(loss=spatial_probability_loss(w, context.gmap.neighbor_edges))


class ResidualMagnitudeObjective(BaseObjective):
    @property
    def name(self) -> str:
        return "residual_reg"

    def __init__(self, **kwargs):
        pass

    def loss(self, context: LossContext) -> LossOutput:
        if context.residuals is None:
            return LossOutput(loss=torch.zeros((), dtype=DTYPE))
        return LossOutput(loss=context.residuals.squared_norm())


class ResidualTemporalObjective(BaseObjective):
    @property
    def name(self) -> str:
        return "residual_temporal"

    def __init__(self, **kwargs):
        pass

    def loss(self, context: LossContext) -> LossOutput:
        if context.residuals is None:
            return LossOutput(loss=torch.zeros((), dtype=DTYPE))
        return LossOutput(loss=context.residuals.squared_difference(context.previous_residuals))
