import math

import pytest
import torch

from nrslam.geometry import DTYPE, Pose, as_tensor, se3_exp
from nrslam.gaussians import CanonicalMap, FrameResiduals, GaussianSet, basis_eval, deform, logit
from nrslam.renderer import backward, project_gaussian, render, render_frame
from nrslam.utils.exceptions import Culled, StaleForward

from .fixtures.scenes import plane_map, small_intrinsics


def two_layer_set(means=None, opacity: float = 0.8) -> GaussianSet:
    means = as_tensor([[0.3, 0.2, 30.0], [-1.1, 0.7, 32.5]]) if means is None else means
    n = len(means)
    return GaussianSet(
        means=means,
        log_scales=torch.full((n, 3), math.log(1.5), dtype=DTYPE),
        rotations=as_tensor([[0.0, 0.0, 0.0, 1.0]] * n),
        opacities=torch.full((n,), opacity, dtype=DTYPE),
        colors=as_tensor([[1.0, 0.2, 0.1], [0.1, 0.3, 0.9]])[:n],
        def_probs=as_tensor([0.1, 0.8])[:n],
    )


def test_empty_map_renders_background():
    K = small_intrinsics()
    out = render_frame(CanonicalMap(), 0.0, K, Pose.identity())
    assert torch.equal(out.transmittance, torch.ones(K.shape, dtype=DTYPE))
    assert torch.equal(out.rgb, torch.zeros(K.height, K.width, 3, dtype=DTYPE))
    assert len(out.contributors) == 0


def test_blend_weights_and_transmittance_sum_to_one():
    K = small_intrinsics()
    out = render_frame(plane_map(K), 0.0, K, Pose.identity())
    c = out.contributors
    per_pixel = torch.zeros(K.height * K.width, dtype=DTYPE).index_add(0, c.pixel, c.weight.detach())
    total = per_pixel.reshape(K.shape) + out.transmittance
    assert torch.allclose(total, torch.ones_like(total), atol=1e-12), f"max deviation {float((total - 1).abs().max())}"


def test_confidence_of_a_uniform_map_is_probability_times_coverage():
    K = small_intrinsics()
    out = render_frame(plane_map(K, def_prob=0.7), 0.0, K, Pose.identity())
    expected = float(torch.sigmoid(logit(0.7))) * (1 - out.transmittance)
    assert torch.allclose(out.confidence, expected, atol=1e-12)


def test_render_ignores_primitive_order():
    K, gmap, residuals, _ = gradient_scene(seed=2)
    gaussians = deform(gmap, GRADIENT_TIME, residuals)
    order = torch.randperm(len(gaussians), generator=torch.Generator().manual_seed(5))
    shuffled = GaussianSet(
        means=gaussians.means[order],
        log_scales=gaussians.log_scales[order],
        rotations=gaussians.rotations[order],
        opacities=gaussians.opacities[order],
        colors=gaussians.colors[order],
        def_probs=gaussians.def_probs[order],
    )
    pose = se3_exp(GRADIENT_TWIST)
    expected, actual = render(gaussians, K, pose), render(shuffled, K, pose)
    for channel in ("rgb", "depth", "transmittance", "confidence"):
        assert torch.allclose(expected.channel(channel), actual.channel(channel), atol=1e-12), f"{channel} depends on primitive order"


def test_plane_depth_is_recovered_where_covered():
    K = small_intrinsics()
    out = render_frame(plane_map(K, depth=40.0), 0.0, K, Pose.identity())
    coverage = 1 - out.transmittance
    covered = coverage > 0.5
    assert covered.float().mean() > 0.9, "the plane should cover the view"
    assert torch.allclose(out.depth[covered] / coverage[covered], torch.full_like(out.depth[covered], 40.0), atol=1e-9)


def test_contributors_are_sorted_front_to_back():
    K = small_intrinsics()
    # primitive 0 is behind primitive 1
    gaussians = two_layer_set(as_tensor([[0.0, 0.0, 35.0], [0.0, 0.0, 30.0]]))
    out = render(gaussians, K, Pose.identity())
    order = [i for i, _ in out.contributors.for_pixel(int(round(K.cy)), int(round(K.cx)))]
    assert order == [1, 0]


def test_gate_zero_renders_canonical_map():
    K = small_intrinsics()
    gmap = plane_map(K, def_prob=0.7)
    bank = gmap.bases["mean"]
    bank.append(torch.arange(len(gmap)), 0.5, 0.2, weight=torch.full((len(gmap), 3), 2.0, dtype=DTYPE))
    canonical = render_frame(gmap, 0.5, K, Pose.identity(), gate=0.0)
    gmap.set_deformation_probability(torch.arange(len(gmap)), 1e-12)
    nearly_rigid = render_frame(gmap, 0.5, K, Pose.identity())
    assert torch.allclose(canonical.rgb, nearly_rigid.rgb, atol=1e-9)
    moved = render_frame(gmap, 0.5, K, Pose.identity(), gate=1.0)
    assert not torch.allclose(canonical.rgb, moved.rgb), "gate 1 must apply the deformation"


def test_traj3d_channel_blends_displacement():
    K = small_intrinsics()
    gmap = plane_map(K)
    n = len(gmap)
    gmap.bases["mean"].append(torch.arange(n), 1.0, 0.3, weight=as_tensor([0.0, 0.0, 1.0]).expand(n, 3))
    out = render_frame(gmap, 0.0, K, Pose.identity(), gate=1.0, target=(1.0, None))
    shift = 1.0 - float(basis_eval(0.0, 1.0, 0.3))
    expected = (1 - out.transmittance).unsqueeze(-1) * as_tensor([0.0, 0.0, shift])
    assert torch.allclose(out.traj3d, expected, atol=1e-12)


def test_project_gaussian_culls_points_behind_camera():
    K = small_intrinsics()
    with pytest.raises(Culled):
        project_gaussian([0.0, 0.0, -5.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0], K, Pose.identity())


GRADIENT_TIME = 0.45
GRADIENT_TWIST = [0.01, -0.02, 0.015, 0.3, -0.2, 0.5]


def gradient_scene(seed: int = 0):
    """20 primitives at distinct depths in a 16 x 16 view, with mean bases and frame residuals."""
    generator = torch.Generator().manual_seed(seed)

    def rand(*shape):
        return torch.rand(*shape, generator=generator, dtype=DTYPE)

    K = small_intrinsics(16, 16, 16.0)
    n = 20
    depth = 30.0 + 10.0 * rand(n)
    u, v = 16.0 * rand(n) - 0.5, 16.0 * rand(n) - 0.5
    gmap = CanonicalMap()
    gmap.add_primitives(
        means=torch.stack([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth], dim=-1),
        log_scales=torch.log(depth.unsqueeze(-1) * (1.0 + rand(n, 3)) / K.fx),
        rotations=torch.cat([0.2 * rand(n, 3) - 0.1, torch.ones(n, 1, dtype=DTYPE)], dim=-1),
        opacity_logits=logit(0.2 + 0.3 * rand(n)),
        colors=rand(n, 3),
        def_logits=4.0 * rand(n) - 2.0,
    )
    gmap.bases["mean"].append(torch.arange(n), 0.5, 0.3, weight=rand(n, 3) - 0.5)
    residuals = FrameResiduals.allocate(gmap.bases, GRADIENT_TIME, torch.ones(n, dtype=torch.bool))
    residuals.values["mean"] = 0.2 * rand(n, 3) - 0.1
    weights = {"rgb": rand(16, 16, 3), "depth": 0.01 * rand(16, 16), "confidence": rand(16, 16)}
    return K, gmap, residuals, weights


@pytest.mark.parametrize(
    "name",
    ["means", "log_scales", "rotations", "opacity_logits", "colors", "def_logits", "basis_weights", "residuals", "pose_twist"],
)
def test_render_gradients_match_central_differences(name):
    K, gmap, residuals, weights = gradient_scene()

    def loss(value):
        scene, frame_residuals, twist = gmap.clone(), residuals.detach(), as_tensor(GRADIENT_TWIST)
        if name == "basis_weights":
            scene.bases["mean"].weight = value
        elif name == "residuals":
            frame_residuals.values["mean"] = value
        elif name == "pose_twist":
            twist = value
        else:
            setattr(scene, name, value)
        out = render_frame(scene, GRADIENT_TIME, K, se3_exp(twist), frame_residuals)
        return sum((out.channel(c) * w).sum() for c, w in weights.items())

    extra = {
        "basis_weights": gmap.bases["mean"].weight,
        "residuals": residuals.values["mean"],
        "pose_twist": as_tensor(GRADIENT_TWIST),
    }
    initial = (extra[name] if name in extra else getattr(gmap, name)).detach().clone()
    value = initial.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(loss(value), value)

    h = 1e-5
    numeric = torch.zeros(initial.numel(), dtype=DTYPE)
    with torch.no_grad():
        for i in range(initial.numel()):
            step = torch.zeros(initial.numel(), dtype=DTYPE)
            step[i] = h
            plus = loss((initial.reshape(-1) + step).reshape(initial.shape))
            minus = loss((initial.reshape(-1) - step).reshape(initial.shape))
            numeric[i] = (plus - minus) / (2 * h)
    numeric = numeric.reshape(initial.shape)
    error = (analytic - numeric).abs()
    tolerance = (1e-3 * numeric.abs()).clamp(min=1e-6)
    assert bool((error <= tolerance).all()), f"{name}: max gradient error {float(error.max())}"


def test_backward_matches_autograd():
    K = small_intrinsics()
    gmap = plane_map(K)
    gmap.opacity_logits = torch.full((len(gmap),), float(logit(0.6)), dtype=DTYPE).requires_grad_(True)
    out = render_frame(gmap, 0.0, K, Pose.identity())
    grad_rgb = torch.rand(K.height, K.width, 3, dtype=DTYPE)
    grads = backward(out, {"rgb": grad_rgb}, {"opacity_logits": gmap.opacity_logits})
    (expected,) = torch.autograd.grad((out.rgb * grad_rgb).sum(), gmap.opacity_logits)
    assert torch.allclose(grads["opacity_logits"], expected, atol=1e-12)


def test_backward_without_graph_is_stale():
    K = small_intrinsics()
    gmap = plane_map(K)
    with torch.no_grad():
        out = render_frame(gmap, 0.0, K, Pose.identity())
    colors = gmap.colors.clone().requires_grad_(True)
    with pytest.raises(StaleForward):
        backward(out, {"rgb": torch.ones(K.height, K.width, 3, dtype=DTYPE)}, {"colors": colors})
