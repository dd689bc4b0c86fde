from dataclasses import dataclass
from typing import Optional

import torch

from nrslam.geometry import DTYPE
from nrslam.gaussians import CanonicalMap, FrameResiduals

REASONS = ("covis", "deformation", "motion", "interval")


@dataclass
class KeyframeDecision:
    is_keyframe: bool
    reason: str = ""
    covis_ratio: float = 1.0
    rdef: float = 0.0
    translation: float = 0.0
    frames_since: int = 0

    def __post_init__(self):
        if self.reason and self.reason not in REASONS:
            raise ValueError(f"Keyframe reason {self.reason!r} not supported. Please choose from {REASONS}")


def relative_residual_ratio(
    gmap: CanonicalMap,
    residuals: Optional[FrameResiduals],
    eps_def: float = 0.5,
    eps: float = 0.05,
    attribute: str = "mean",
) -> float:
    """Mean over deformable primitives of sum_k ||dw_k|| / (||w_k|| + eps) for one attribute.

    Deformable means w_d > ``eps_def``; no such primitive gives 0.
    """
    deformable = gmap.def_probs.detach() > eps_def
    if not bool(deformable.any()):
        return 0.0
    per_primitive = torch.zeros(len(gmap), dtype=DTYPE)
    if residuals is not None and len(residuals.uids.get(attribute, [])):
        bank = gmap.bases[attribute]
        rows, found = bank.rows_of(residuals.uids[attribute])
        rows = rows[found]
        ratio = residuals.values[attribute].detach()[found].norm(dim=-1) / (bank.weight.detach()[rows].norm(dim=-1) + eps)
        per_primitive = per_primitive.index_add(0, bank.owner[rows], ratio)
    return float(per_primitive[deformable].mean())


def keyframe_decision(
    covis_ratio: float,
    rdef: float,
    translation: float,
    frames_since: int,
    covis_threshold: float = 0.75,
    rdef_threshold: float = 0.1,
    translation_threshold: float = 8.0,
    interval: int = 20,
) -> KeyframeDecision:
    """First matching reason wins: low co-visibility, large residual ratio, motion, then the frame interval."""
    checks = (
        ("covis", covis_ratio < covis_threshold),
        ("deformation", rdef > rdef_threshold),
        ("motion", translation > translation_threshold),
        ("interval", frames_since > interval),
    )
    reason = next((name for name, hit in checks if hit), "")
    return KeyframeDecision(
        is_keyframe=bool(reason),
        reason=reason,
        covis_ratio=covis_ratio,
        rdef=rdef,
        translation=translation,
        frames_since=frames_since,
    )
