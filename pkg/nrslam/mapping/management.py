"""Dynamic deformation field management: densify, merge, prune and freeze temporal bases."""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
import torch
from loguru import logger

from nrslam.geometry import DTYPE, as_tensor
from nrslam.gaussians import ATTRIBUTES, CanonicalMap, FrameResiduals, basis_eval
from nrslam.mapping.extension import DEFAULT_EXTENT, mean_extent
from nrslam.renderer import RenderOutput
from nrslam.utils.logging import ManagementLog
from nrslam.utils.misc import timed

EXPIRY_EXTENTS = 3.0


@dataclass
class ManagementThresholds:
    delta_cov: float = 0.5
    tau_rgb: float = 0.05
    tau_prob: float = 0.5
    tau_err: float = 1.0
    eta_mu: float = 0.5
    eta_sigma: float = 0.1
    delta_act: float = 0.05
    sigma_new_factor: float = 0.7
    activation_floor: float = 1e-6
    default_extent: float = DEFAULT_EXTENT

    @classmethod
    def from_config(cls, config) -> "ManagementThresholds":
        m = config.management
        return cls(
            delta_cov=m.delta_cov,
            tau_rgb=m.tau_rgb,
            tau_prob=m.tau_prob,
            tau_err=m.tau_err,
            eta_mu=m.eta_mu,
            eta_sigma=m.eta_sigma,
            delta_act=m.delta_act,
            sigma_new_factor=m.sigma_new_factor,
            activation_floor=m.activation_floor,
        )


@dataclass
class ManagementReport:
    keyframe: int
    inserted_coverage: Dict[str, int] = field(default_factory=lambda: {a: 0 for a in ATTRIBUTES})
    inserted_error: Dict[str, int] = field(default_factory=lambda: {a: 0 for a in ATTRIBUTES})
    merged: Dict[str, int] = field(default_factory=lambda: {a: 0 for a in ATTRIBUTES})
    pruned: Dict[str, int] = field(default_factory=lambda: {a: 0 for a in ATTRIBUTES})
    frozen: Dict[str, int] = field(default_factory=lambda: {a: 0 for a in ATTRIBUTES})
    active: Dict[str, int] = field(default_factory=lambda: {a: 0 for a in ATTRIBUTES})
    # (uids folded together, uid of the merged basis) per attribute
    merges: Dict[str, List[Tuple[List[int], int]]] = field(default_factory=lambda: {a: [] for a in ATTRIBUTES})

    def rows(self) -> List[ManagementLog]:
        return [
            ManagementLog(
                keyframe=self.keyframe,
                attribute=attr,
                inserted_coverage=self.inserted_coverage[attr],
                inserted_error=self.inserted_error[attr],
                merged=self.merged[attr],
                pruned=self.pruned[attr],
                frozen=self.frozen[attr],
                active=self.active[attr],
            )
            for attr in ATTRIBUTES
        ]


def error_scores(render: RenderOutput, image: torch.Tensor, def_probs: torch.Tensor, tau_rgb: float, tau_prob: float) -> torch.Tensor:
    """E_def per primitive: blend weight over bad pixels (RGB error norm > ``tau_rgb``) times w_d, deformable primitives only."""
    bad = torch.linalg.norm(render.rgb.detach() - image, dim=-1) > tau_rgb
    w = def_probs.detach()
    return render.contributors.accumulate(bad.to(DTYPE)) * w * (w > tau_prob).to(DTYPE)


def similar(center_a, extent_a, center_b, extent_b, eta_mu: float, eta_sigma: float) -> bool:
    """Close centers (within ``eta_mu`` of the smaller extent) and extents within ``eta_sigma`` relative difference."""
    close = abs(center_a - center_b) < eta_mu * min(extent_a, extent_b)
    alike = abs(extent_a - extent_b) / max(extent_a, extent_b) < eta_sigma
    return close and alike


def similar_sets(owner: np.ndarray, center: np.ndarray, extent: np.ndarray, eta_mu: float, eta_sigma: float) -> List[List[int]]:
    """Greedy maximal sets of mutually similar bases per primitive, scanned in temporal order.

    Arguments are the candidate rows; returned sets hold positions into them and have at least two members.
    """
    order = np.lexsort((center, owner))
    sets, current = [], []
    for pos in order:
        if current and owner[current[0]] == owner[pos] and all(
            similar(center[j], extent[j], center[pos], extent[pos], eta_mu, eta_sigma) for j in current
        ):
            current.append(pos)
            continue
        if len(current) > 1:
            sets.append(current)
        current = [pos]
    if len(current) > 1:
        sets.append(current)
    return sets


def activations(gmap: CanonicalMap, attribute: str, times: Sequence[float]) -> torch.Tensor:
    """u_k = w_d * ||w_k|| * sum over window times of phi(t; tau_k, sigma_k) for every basis row."""
    bank = gmap.bases[attribute]
    if not len(bank):
        return torch.zeros(0, dtype=DTYPE)
    phi = torch.stack([basis_eval(t, bank.center.detach(), bank.extent.detach()) for t in times]).sum(0)
    w = gmap.def_probs.detach()[bank.owner]
    return w * bank.weight.detach().norm(dim=-1) * phi


def _densify(gmap: CanonicalMap, attr: str, t: float, scores: torch.Tensor, th: ManagementThresholds, report: ManagementReport):
    bank = gmap.bases[attr]
    sigma_init = mean_extent(gmap, attr, th.default_extent)
    coverage = bank.coverage(t, len(gmap))
    low = torch.nonzero(coverage < th.delta_cov).flatten()
    if len(low):
        bank.append(low, t, sigma_init)
    report.inserted_coverage[attr] = len(low)
    if scores is not None:
        high = torch.nonzero(scores > th.tau_err).flatten()
        if len(high):
            bank.append(high, t, th.sigma_new_factor * sigma_init)
        report.inserted_error[attr] = len(high)


def _merge(gmap: CanonicalMap, attr: str, th: ManagementThresholds, report: ManagementReport):
    bank = gmap.bases[attr]
    rows = torch.nonzero(~bank.frozen).flatten()
    if len(rows) < 2:
        return
    sets = similar_sets(
        bank.owner[rows].numpy(), bank.center.detach()[rows].numpy(), bank.extent.detach()[rows].numpy(), th.eta_mu, th.eta_sigma
    )
    if not sets:
        return
    keep = torch.ones(len(bank), dtype=torch.bool)
    owners, centers, extents, weights, old = [], [], [], [], []
    for members in sets:
        r = rows[torch.as_tensor(members)]
        keep[r] = False
        owners.append(int(bank.owner[r[0]]))
        centers.append(float(bank.center.detach()[r].mean()))
        extents.append(float(bank.extent.detach()[r].mean()))
        weights.append(bank.weight.detach()[r].sum(0))
        old.append(bank.uid[r].tolist())
    bank.keep(keep)
    new_uids = bank.append(owners, as_tensor(centers), as_tensor(extents), torch.stack(weights))
    report.merges[attr] = list(zip(old, new_uids.tolist()))
    report.merged[attr] = sum(len(o) for o in old)


def _prune(gmap: CanonicalMap, attr: str, t: float, times: Sequence[float], protected: torch.Tensor, th: ManagementThresholds, report: ManagementReport):
    bank = gmap.bases[attr]
    if not len(bank):
        return
    u = activations(gmap, attr, times)
    total = torch.zeros(len(gmap), dtype=DTYPE).index_add(0, bank.owner, u)[bank.owner]
    relative = torch.where(total > 0, u / total.clamp(min=1e-300), torch.zeros_like(u))
    inactive = (relative < th.delta_act) | (total < th.activation_floor)
    candidate = inactive & ~bank.frozen & ~protected
    expired = bank.center.detach() + EXPIRY_EXTENTS * bank.extent.detach() < t
    freeze = candidate & expired
    remove = candidate & ~expired
    bank.frozen = bank.frozen | freeze
    bank.keep(~remove)
    report.frozen[attr] = int(freeze.sum())
    report.pruned[attr] = int(remove.sum())


@timed
def manage_deformation_field(
    gmap: CanonicalMap,
    t: float,
    window_times: Sequence[float],
    render: RenderOutput = None,
    image: torch.Tensor = None,
    thresholds: ManagementThresholds = None,
    residual_sets: Iterable[FrameResiduals] = (),
    keyframe: int = -1,
) -> ManagementReport:
    """One management pass at time ``t`` over every attribute: densify, merge, then prune or freeze.

    ``render``/``image`` of the current keyframe drive error densification. Bases inserted by
    this pass are never pruned by it. Per-frame residuals in ``residual_sets`` are folded into
    merged bases and dropped for removed ones.
    """
    th = thresholds or ManagementThresholds()
    report = ManagementReport(keyframe=keyframe)
    scores = None
    if render is not None and image is not None and render.contributors is not None:
        scores = error_scores(render, image, gmap.def_probs, th.tau_rgb, th.tau_prob)
    gmap.detach_()
    for attr in ATTRIBUTES:
        bank = gmap.bases[attr]
        first_new = bank.next_uid
        _densify(gmap, attr, t, scores, th, report)
        _merge(gmap, attr, th, report)
        # fresh insertions only; merged bases replace existing ones and stay prunable
        merged_uids = torch.as_tensor([new for _, new in report.merges[attr]], dtype=torch.long)
        protected = (bank.uid >= first_new) & ~torch.isin(bank.uid, merged_uids)
        _prune(gmap, attr, t, window_times, protected, th, report)
        report.active[attr] = int((~bank.frozen).sum())

    for residuals in residual_sets:
        for attr in ATTRIBUTES:
            residuals.apply_merges(attr, report.merges[attr])
        residuals.restrict(gmap.bases)
    logger.debug(
        "Management: "
        + ", ".join(
            f"{a}: +{report.inserted_coverage[a]}/+{report.inserted_error[a]} merged {report.merged[a]} "
            f"pruned {report.pruned[a]} frozen {report.frozen[a]}"
            for a in ATTRIBUTES
        )
    )
    return report
