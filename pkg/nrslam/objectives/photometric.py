from typing import Optional

import torch
from torchmetrics.functional import structural_similarity_index_measure

from nrslam.geometry import DTYPE
from nrslam.objectives.base import BaseObjective, LossContext, LossOutput

SSIM_KERNEL = 11
SSIM_SIGMA = 1.5


def _pixel_mask(shape, valid=None, covis=None, weight=None) -> torch.Tensor:
    mask = torch.ones(shape, dtype=DTYPE)
    if valid is not None:
        mask = mask * valid.to(DTYPE)
    if covis is not None:
        mask = mask * covis.to(DTYPE)
    if weight is not None:
        mask = mask * weight
    return mask


def photometric_l2(
    rendered: torch.Tensor,
    observed: torch.Tensor,
    valid: Optional[torch.Tensor] = None,
    covis: Optional[torch.Tensor] = None,
    weight: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean over all pixels of the masked squared RGB error (summed over channels)."""
    if rendered.shape != observed.shape:
        raise ValueError(f"Image shapes differ: {tuple(rendered.shape)} vs {tuple(observed.shape)}")
    mask = _pixel_mask(rendered.shape[:2], valid, covis, weight)
    error = ((rendered - observed) ** 2).sum(-1)
    return (mask * error).sum() / mask.numel()


def photometric_l1(
    rendered: torch.Tensor,
    observed: torch.Tensor,
    valid: Optional[torch.Tensor] = None,
    covis: Optional[torch.Tensor] = None,
    weight: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean over all pixels of the masked absolute RGB error (averaged over channels)."""
    if rendered.shape != observed.shape:
        raise ValueError(f"Image shapes differ: {tuple(rendered.shape)} vs {tuple(observed.shape)}")
    mask = _pixel_mask(rendered.shape[:2], valid, covis, weight)
    error = (rendered - observed).abs().mean(-1)
    return (mask * error).sum() / mask.numel()


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM of two (H, W, 3) images in [0, 1], Gaussian window 11 / 1.5."""
    return structural_similarity_index_measure(
        a.permute(2, 0, 1).unsqueeze(0),
        b.permute(2, 0, 1).unsqueeze(0),
        gaussian_kernel=True,
        sigma=SSIM_SIGMA,
        kernel_size=SSIM_KERNEL,
        data_range=1.0,
    )


def photometric_ssim_mix(rendered: torch.Tensor, observed: torch.Tensor, lam: float) -> torch.Tensor:
    """lam * L1 + (1 - lam) * (1 - SSIM)."""
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    l1 = (rendered - observed).abs().mean()
    if lam == 1:
        return l1
    return lam * l1 + (1 - lam) * (1 - ssim(rendered, observed))


class PhotometricL2Objective(BaseObjective):
    @property
    def name(self) -> str:
        return "photometric"

    def __init__(self, **kwargs):
        pass

    def loss(self, context: LossContext) -> LossOutput:
        covis = None if context.masks is None else context.masks.covis
        valid = None if context.masks is None else context.masks.valid
        loss = photometric_l2(context.render.rgb, context.image, valid, covis, context.pixel_weight)
        return LossOutput(loss=loss)


class PhotometricL1Objective(BaseObjective):
    @property
    def name(self) -> str:
        return "photometric_l1"

    def __init__(self, **kwargs):
        pass

    def loss(self, context: LossContext) -> LossOutput:
        covis = None if context.masks is None else context.masks.covis
        valid = None if context.masks is None else context.masks.valid
        loss = photometric_l1(context.render.rgb, context.image, valid, covis, context.pixel_weight)
        return LossOutput(loss=loss)


class SSIMMixObjective(BaseObjective):
    @property
    def name(self) -> str:
        return "ssim_mix"

    def __init__(self, lam: float = 0.2, **kwargs):
        self.lam = lam

    def loss(self, context: LossContext) -> LossOutput:
        return LossOutput(loss=photometric_ssim_mix(context.render.rgb, context.image, self.lam), extra_info={"lambda": self.lam})
