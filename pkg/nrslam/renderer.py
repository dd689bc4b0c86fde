"""Differentiable software rasterizer for (deformed) Gaussian sets.

Every (primitive, pixel) pair inside the primitive's 3-sigma box is enumerated at once,
pairs are sorted by pixel and then by camera depth, and front-to-back alpha blending is
done with a segmented cumulative sum of log(1 - alpha). Everything stays in torch, so
reverse mode is plain autograd over the forward graph; ``backward`` exposes it in terms of
channel gradients the way a hand-written rasterizer would.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import torch

from nrslam.geometry import DTYPE, Intrinsics, Pose, as_tensor, quat_to_rotmat
from nrslam.gaussians.basis import FrameResiduals
from nrslam.gaussians.map import CanonicalMap, GaussianSet, deform
from nrslam.utils.exceptions import Culled, StaleForward

NEAR_PLANE = 1e-3
ALPHA_MAX = 0.99
MIN_TRANSMITTANCE = 1e-4
COV_FLOOR = 0.3
CULL_MARGIN = 1.3
SIGMA_EXTENT = 3.0

ALL_CHANNELS = frozenset({"rgb", "depth", "confidence", "traj3d"})
DEFAULT_CHANNELS = frozenset({"rgb", "depth", "confidence"})


@dataclass
class ProjectedGaussian:
    mean2d: torch.Tensor
    cov2d: torch.Tensor
    depth: float
    source_index: int


@dataclass(eq=False)
class ProjectedGaussians:
    mean2d: torch.Tensor
    cov2d: torch.Tensor
    depth: torch.Tensor
    visible: torch.Tensor


@dataclass(eq=False)
class Contributors:
    """Per-pixel contributor lists in CSR-like form, sorted by pixel then front to back."""

    pixel: torch.Tensor
    index: torch.Tensor
    weight: torch.Tensor
    height: int
    width: int
    num_primitives: int

    def __len__(self):
        return int(self.pixel.shape[0])

    def for_pixel(self, v: int, u: int) -> List[Tuple[int, float]]:
        p = v * self.width + u
        lo = int(torch.searchsorted(self.pixel, torch.tensor(p)))
        hi = int(torch.searchsorted(self.pixel, torch.tensor(p), right=True))
        return [(int(i), float(w)) for i, w in zip(self.index[lo:hi], self.weight[lo:hi].detach())]

    def accumulate(self, per_pixel: Optional[torch.Tensor] = None) -> torch.Tensor:
        """sum_u a_i(u) * value(u) for every primitive; plain blend-weight sums when ``per_pixel`` is None."""
        values = self.weight.detach()
        if per_pixel is not None:
            values = values * per_pixel.reshape(-1).to(DTYPE)[self.pixel]
        return torch.zeros(self.num_primitives, dtype=DTYPE).index_add(0, self.index, values)


@dataclass(eq=False)
class RenderOutput:
    rgb: torch.Tensor
    depth: torch.Tensor
    transmittance: torch.Tensor
    confidence: torch.Tensor
    traj3d: Optional[torch.Tensor]
    contributors: Optional[Contributors]

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.transmittance.shape)

    def channel(self, name: str) -> torch.Tensor:
        return getattr(self, name)

    def detach(self) -> "RenderOutput":
        return RenderOutput(
            self.rgb.detach(),
            self.depth.detach(),
            self.transmittance.detach(),
            self.confidence.detach(),
            None if self.traj3d is None else self.traj3d.detach(),
            self.contributors,
        )


def covariance_3d(log_scales: torch.Tensor, rotations: torch.Tensor) -> torch.Tensor:
    R = quat_to_rotmat(rotations)
    M = R * torch.exp(log_scales).unsqueeze(-2)
    return M @ M.transpose(-1, -2)


def project_gaussians(gaussians: GaussianSet, K: Intrinsics, pose: Pose) -> ProjectedGaussians:
    view = pose.inverse()
    W = view.rotation_matrix
    cam = gaussians.means @ W.transpose(-1, -2) + view.translation
    x, y, z = cam.unbind(-1)
    in_front = z > NEAR_PLANE
    z = torch.where(in_front, z, torch.ones_like(z))
    u = K.fx * x / z + K.cx
    v = K.fy * y / z + K.cy

    zero = torch.zeros_like(z)
    J = torch.stack(
        [
            torch.stack([K.fx / z, zero, -K.fx * x / z**2], dim=-1),
            torch.stack([zero, K.fy / z, -K.fy * y / z**2], dim=-1),
        ],
        dim=-2,
    )
    JW = J @ W
    cov2d = JW @ covariance_3d(gaussians.log_scales, gaussians.rotations) @ JW.transpose(-1, -2)
    cov2d = cov2d + COV_FLOOR * torch.eye(2, dtype=DTYPE)

    half_w, half_h = 0.5 * K.width, 0.5 * K.height
    with torch.no_grad():
        on_screen = ((u - half_w).abs() <= CULL_MARGIN * half_w) & ((v - half_h).abs() <= CULL_MARGIN * half_h)
    return ProjectedGaussians(torch.stack([u, v], dim=-1), cov2d, z, in_front & on_screen)


def project_gaussian(mean, log_scale, rotation, K: Intrinsics, T: Pose, source_index: int = 0) -> ProjectedGaussian:
    single = GaussianSet(
        means=as_tensor(mean).reshape(1, 3),
        log_scales=as_tensor(log_scale).reshape(1, 3),
        rotations=as_tensor(rotation).reshape(1, 4),
        opacities=torch.ones(1, dtype=DTYPE),
        colors=torch.zeros(1, 3, dtype=DTYPE),
        def_probs=torch.zeros(1, dtype=DTYPE),
    )
    projected = project_gaussians(single, K, T)
    if not bool(projected.visible[0]):
        raise Culled(f"Primitive {source_index} is behind the camera or outside the screen margin")
    return ProjectedGaussian(projected.mean2d[0], projected.cov2d[0], float(projected.depth[0]), source_index)


def _empty_output(K: Intrinsics, num_primitives: int, background: torch.Tensor, channels) -> RenderOutput:
    H, W = K.height, K.width
    empty = torch.zeros(0, dtype=torch.long)
    return RenderOutput(
        rgb=background.expand(H, W, 3).clone(),
        depth=torch.zeros(H, W, dtype=DTYPE),
        transmittance=torch.ones(H, W, dtype=DTYPE),
        confidence=torch.zeros(H, W, dtype=DTYPE),
        traj3d=torch.zeros(H, W, 3, dtype=DTYPE) if "traj3d" in channels else None,
        contributors=Contributors(empty, empty.clone(), torch.zeros(0, dtype=DTYPE), H, W, num_primitives),
    )


def _enumerate_pairs(mean2d: torch.Tensor, cov2d: torch.Tensor, K: Intrinsics):
    """Primitive id and pixel coordinates of every pair inside a primitive's clipped 3-sigma box."""
    with torch.no_grad():
        a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
        lambda_max = 0.5 * (a + c) + torch.sqrt((0.5 * (a - c)) ** 2 + b * b)
        radius = SIGMA_EXTENT * torch.sqrt(lambda_max)
        x0 = torch.ceil(mean2d[:, 0] - radius).clamp(min=0).long()
        x1 = torch.floor(mean2d[:, 0] + radius).clamp(max=K.width - 1).long()
        y0 = torch.ceil(mean2d[:, 1] - radius).clamp(min=0).long()
        y1 = torch.floor(mean2d[:, 1] + radius).clamp(max=K.height - 1).long()
        nx = (x1 - x0 + 1).clamp(min=0)
        ny = (y1 - y0 + 1).clamp(min=0)
        counts = nx * ny
        owner = torch.repeat_interleave(torch.arange(len(counts)), counts)
        offsets = torch.cumsum(counts, 0) - counts
        local = torch.arange(int(counts.sum())) - offsets[owner]
        px = x0[owner] + local % nx[owner]
        py = y0[owner] + torch.div(local, nx[owner], rounding_mode="floor")
    return owner, px, py


def render(
    gaussians: GaussianSet,
    K: Intrinsics,
    pose: Pose,
    channels: Iterable[str] = DEFAULT_CHANNELS,
    background: Optional[torch.Tensor] = None,
) -> RenderOutput:
    """Front-to-back alpha blending of ``gaussians`` seen from ``pose`` (camera-to-world)."""
    channels = frozenset(channels)
    background = torch.zeros(3, dtype=DTYPE) if background is None else as_tensor(background)
    H, W = K.height, K.width
    n = len(gaussians)
    if n == 0:
        return _empty_output(K, n, background, channels)

    projected = project_gaussians(gaussians, K, pose)
    visible = torch.nonzero(projected.visible).flatten()
    if len(visible) == 0:
        return _empty_output(K, n, background, channels)
    mean2d = projected.mean2d[visible]
    cov2d = projected.cov2d[visible]
    depth = projected.depth[visible]

    owner, px, py = _enumerate_pairs(mean2d, cov2d, K)
    if len(owner) == 0:
        return _empty_output(K, n, background, channels)

    # canonical order: pixel, then depth, ties broken by primitive index
    with torch.no_grad():
        rank = torch.empty(len(visible), dtype=torch.long)
        rank[torch.argsort(depth, stable=True)] = torch.arange(len(visible))
        order = torch.argsort((py * W + px) * len(visible) + rank[owner])
    owner, px, py = owner[order], px[order], py[order]
    pixel = py * W + px

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic_a = cov2d[:, 1, 1] / det
    conic_b = -cov2d[:, 0, 1] / det
    conic_c = cov2d[:, 0, 0] / det
    dx = px.to(DTYPE) - mean2d[owner, 0]
    dy = py.to(DTYPE) - mean2d[owner, 1]
    power = -0.5 * (conic_a[owner] * dx * dx + 2 * conic_b[owner] * dx * dy + conic_c[owner] * dy * dy)
    opacity = gaussians.opacities[visible]
    alpha = (opacity[owner] * torch.exp(power)).clamp(max=ALPHA_MAX)

    # segmented exclusive cumsum of log(1 - alpha) gives the transmittance in front of each pair
    log_keep = torch.log1p(-alpha)
    running = torch.cumsum(log_keep, 0)
    with torch.no_grad():
        first = torch.ones(len(pixel), dtype=torch.bool)
        first[1:] = pixel[1:] != pixel[:-1]
        start = torch.cummax(torch.where(first, torch.arange(len(pixel)), torch.zeros_like(pixel)), 0).values
    log_before = running - log_keep - (running[start] - log_keep[start])
    transmittance_before = torch.exp(log_before)

    with torch.no_grad():
        keep = torch.nonzero(transmittance_before * (1 - alpha) >= MIN_TRANSMITTANCE).flatten()
    owner, pixel = owner[keep], pixel[keep]
    alpha, log_keep = alpha[keep], log_keep[keep]
    weight = alpha * transmittance_before[keep]

    num_pixels = H * W
    transmittance = torch.exp(torch.zeros(num_pixels, dtype=DTYPE).index_add(0, pixel, log_keep))

    def blend(values: torch.Tensor) -> torch.Tensor:
        shape = (num_pixels,) + tuple(values.shape[1:])
        contrib = weight.reshape((-1,) + (1,) * (values.dim() - 1)) * values[owner]
        return torch.zeros(shape, dtype=DTYPE).index_add(0, pixel, contrib)

    source = visible[owner]
    rgb = blend(gaussians.colors[visible]) + transmittance.unsqueeze(-1) * background
    depth_img = blend(depth) if "depth" in channels else torch.zeros(num_pixels, dtype=DTYPE)
    confidence = blend(gaussians.def_probs[visible]) if "confidence" in channels else torch.zeros(num_pixels, dtype=DTYPE)
    traj3d = None
    if "traj3d" in channels:
        if gaussians.displacement is None:
            traj3d = torch.zeros(H, W, 3, dtype=DTYPE)
        else:
            traj3d = blend(gaussians.displacement[visible]).reshape(H, W, 3)

    return RenderOutput(
        rgb=rgb.reshape(H, W, 3),
        depth=depth_img.reshape(H, W),
        transmittance=transmittance.reshape(H, W),
        confidence=confidence.reshape(H, W),
        traj3d=traj3d,
        contributors=Contributors(pixel, source, weight, H, W, n),
    )


def render_frame(
    gmap: CanonicalMap,
    t: float,
    K: Intrinsics,
    pose: Pose,
    residuals: Optional[FrameResiduals] = None,
    channels: Iterable[str] = DEFAULT_CHANNELS,
    gate: Optional[torch.Tensor] = None,
    target: Optional[Tuple[float, Optional[FrameResiduals]]] = None,
) -> RenderOutput:
    """Renders the map deformed to time ``t``; with ``target=(t1, residuals1)`` the traj3d
    channel carries the displacement of every primitive from ``t`` to ``t1``."""
    gaussians = deform(gmap, t, residuals, gate)
    channels = frozenset(channels)
    if target is not None:
        moved = deform(gmap, target[0], target[1], gate)
        gaussians.displacement = moved.means - gaussians.means
        channels = channels | {"traj3d"}
    return render(gaussians, K, pose, channels)


def backward(
    out: RenderOutput,
    grad_channels: Dict[str, torch.Tensor],
    inputs: Dict[str, torch.Tensor],
) -> Dict[str, torch.Tensor]:
    """Gradients of sum_c <dL/dc, c> with respect to every tensor in ``inputs``."""
    if out.contributors is None:
        raise StaleForward()
    outputs, grads = [], []
    for name, grad in grad_channels.items():
        channel = out.channel(name)
        if channel is None:
            raise StaleForward(f"Channel {name!r} was not rendered")
        if channel.requires_grad:
            outputs.append(channel)
            grads.append(as_tensor(grad).expand_as(channel))
    zeros = {name: torch.zeros_like(value) for name, value in inputs.items()}
    if not outputs:
        if len(out.contributors) and any(v.requires_grad for v in inputs.values()):
            raise StaleForward("Render output carries no autograd graph")
        return zeros
    results = torch.autograd.grad(outputs, list(inputs.values()), grad_outputs=grads, retain_graph=True, allow_unused=True)
    return {name: zeros[name] if g is None else g for name, g in zip(inputs, results)}
