import math

import pytest
import torch

from nrslam.geometry import DTYPE, Pose, as_tensor
from nrslam.gaussians import CanonicalMap, FrameResiduals, logit
from nrslam.objectives import (
    AnnealSchedule,
    LossContext,
    ObjectivePipeline,
    RobustPenalty,
    TrackPrediction,
    anneal_weight,
    bce_loss,
    geometric_loss,
    geometric_terms,
    irls_term,
    irls_weight,
    photometric_l2,
    photometric_ssim_mix,
    smoothness_regularizers,
    spatial_probability_loss,
    ssim,
)
from nrslam.priors import Priors, Tracks
from nrslam.renderer import RenderOutput
from nrslam.utils.exceptions import ShapeMismatch

from .fixtures.scenes import small_intrinsics


def constant_render(value: float = 0.5, depth: float = 10.0, shape=(12, 16)) -> RenderOutput:
    H, W = shape
    return RenderOutput(
        rgb=torch.full((H, W, 3), value, dtype=DTYPE),
        depth=torch.full((H, W), depth, dtype=DTYPE),
        transmittance=torch.zeros(H, W, dtype=DTYPE),
        confidence=torch.zeros(H, W, dtype=DTYPE),
        traj3d=None,
        contributors=None,
    )


@pytest.mark.parametrize("k", [0, 1, 5, 10, 37, 200])
def test_anneal_weight_closed_form(k):
    schedule = AnnealSchedule(lambda0=2.0, lambda_min=0.05, tau=8.0)
    expected = 2.0 * math.exp(-k / 8.0) + 0.05
    assert math.isclose(anneal_weight(k, schedule), expected, rel_tol=1e-12)


def test_anneal_weight_decreases_to_floor():
    schedule = AnnealSchedule()
    values = [anneal_weight(k, schedule) for k in range(0, 500, 10)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert math.isclose(values[-1], schedule.lambda_min, abs_tol=1e-12)


@pytest.mark.parametrize("kwargs", [dict(tau=0.0), dict(lambda0=-1.0), dict(lambda_min=-0.1)])
def test_anneal_schedule_validation(kwargs):
    with pytest.raises(ValueError):
        AnnealSchedule(**kwargs)


@pytest.mark.parametrize(
    "r, expected",
    [(0.0, 0.0), (0.5, 0.5 / (0.5 + 1e-6)), (1.0, 1.0 / (1.0 + 1e-6)), (4.0, 1.0 / (4.0 + 1e-6))],
)
def test_irls_weight_of_huber(r, expected):
    weight = float(irls_weight(r, RobustPenalty(threshold=1.0)))
    assert math.isclose(weight, expected, rel_tol=1e-12, abs_tol=1e-15), f"gamma({r}) = {weight}, expected {expected}"


def test_irls_weight_rejects_negative_residuals():
    with pytest.raises(ValueError):
        irls_weight(torch.tensor([-1.0]), RobustPenalty())


def test_irls_term_without_robustness_is_half_mean_square():
    squared = as_tensor([1.0, 4.0, 9.0, 16.0])
    weights = as_tensor([1.0, 1.0, 0.0, 1.0])
    value = irls_term(squared, weights, robust=False)
    assert math.isclose(float(value), 0.5 * (1 + 4 + 16) / 3, rel_tol=1e-12)


def test_irls_term_downweights_outliers():
    squared = as_tensor([0.01, 0.01, 0.01, 10000.0])
    robust = float(irls_term(squared, robust=True))
    plain = float(irls_term(squared, robust=False))
    assert robust < 0.01 * plain


def test_geometric_loss_anneals_every_term():
    terms = {"depth": (as_tensor([4.0]), as_tensor([1.0]))}
    schedule = AnnealSchedule(lambda0=1.0, lambda_min=0.0, tau=1.0)
    first, info = geometric_loss(terms, 0, schedule, robust=False)
    later, _ = geometric_loss(terms, 3, schedule, robust=False)
    assert math.isclose(float(first), 2.0, rel_tol=1e-12)
    assert math.isclose(float(later), 2.0 * math.exp(-3), rel_tol=1e-12)
    assert info["lambda"] == 1.0 and info["depth"] == 2.0


def test_geometric_terms_are_zero_for_a_consistent_prediction():
    K = small_intrinsics()
    pose = Pose(as_tensor([0.0, 0.0, 0.0, 1.0]), as_tensor([1.0, 2.0, 3.0]))
    world = as_tensor([[0.0, 0.0, 40.0], [2.0, -1.0, 35.0]])
    cam = pose.inverse().transform(world)
    pixels = torch.stack([K.fx * cam[:, 0] / cam[:, 2] + K.cx, K.fy * cam[:, 1] / cam[:, 2] + K.cy], dim=-1)
    tracks = TrackPrediction(world=world, observed_cam=cam, observed_px=pixels, weight=torch.ones(2, dtype=DTYPE))
    priors = Priors(depth=torch.full(K.shape, 10.0, dtype=DTYPE), tracks=Tracks.empty())
    terms = geometric_terms(constant_render(depth=10.0), priors, None, tracks, pose, K)
    assert set(terms) == {"depth", "traj2d", "traj3d"}
    for name, (squared, _) in terms.items():
        assert float(squared.abs().max()) < 1e-18, f"{name} residual should vanish"


def test_photometric_l2_respects_masks_and_weights():
    rendered = torch.zeros(2, 2, 3, dtype=DTYPE)
    observed = torch.ones(2, 2, 3, dtype=DTYPE)
    valid = torch.tensor([[True, True], [True, False]])
    covis = torch.tensor([[True, False], [True, True]])
    weight = as_tensor([[0.5, 1.0], [1.0, 1.0]])
    value = photometric_l2(rendered, observed, valid, covis, weight)
    # two surviving pixels with squared error 3, one weighted by 0.5, averaged over four pixels
    assert math.isclose(float(value), (0.5 * 3 + 3) / 4, rel_tol=1e-12)


def test_ssim_of_identical_images_is_one():
    image = torch.rand(24, 32, 3, dtype=DTYPE, generator=torch.Generator().manual_seed(0))
    assert math.isclose(float(ssim(image, image)), 1.0, abs_tol=1e-9)
    assert math.isclose(float(photometric_ssim_mix(image, image, 0.2)), 0.0, abs_tol=1e-9)


def test_ssim_mix_lambda_range():
    image = torch.zeros(16, 16, 3, dtype=DTYPE)
    with pytest.raises(ValueError):
        photometric_ssim_mix(image, image, 1.5)


def test_bce_loss_values():
    assert math.isclose(float(bce_loss([0.5, 0.5], [1.0, 0.0])), 2 * math.log(2), rel_tol=1e-9)
    assert float(bce_loss([1.0], [1.0])) < 1e-4, "w is clamped away from 0 and 1"


def test_spatial_loss_counts_each_directed_edge():
    w = as_tensor([0.0, 1.0, 0.5])
    edges = torch.tensor([[0, 1, 1, 2], [1, 0, 2, 1]])
    assert math.isclose(float(spatial_probability_loss(w, edges)), 2 * (1.0 + 0.25), rel_tol=1e-12)


@pytest.mark.parametrize(
    "definition, match",
    [
        ([dict(name="photometric")], "weight"),
        ([dict(weight=1.0)], "name"),
        ([dict(name="unknown", weight=1.0)], "not supported"),
        ([dict(name="photometric", weight=-1.0)], "negative"),
        ([dict(name="photometric", weight="1")], "float"),
        ([dict(name="photometric", weight=1.0), dict(name="photometric", weight=2.0)], "twice"),
        (["photometric"], "dictionary"),
    ],
)
def test_pipeline_definition_validation(definition, match):
    with pytest.raises(ValueError, match=match):
        ObjectivePipeline(definition)


def test_pipeline_skips_zero_weights_and_sums_the_rest():
    context = LossContext(render=constant_render(0.25), image=torch.full((12, 16, 3), 0.5, dtype=DTYPE), intrinsics=small_intrinsics(), pose=Pose.identity())
    pipeline = ObjectivePipeline(
        [dict(name="photometric", weight=2.0), dict(name="photometric_l1", weight=1.0), dict(name="bce", weight=0.0)]
    )
    total, events = pipeline(context)
    assert [e.name for e in events] == ["photometric", "photometric_l1"]
    assert math.isclose(float(total), 2.0 * 3 * 0.0625 + 0.25, rel_tol=1e-12)
    assert events[0].asdict()["photometric_weight"] == 2.0


def test_smoothness_regularizers():
    gmap = CanonicalMap()
    gmap.add_primitives(
        means=as_tensor([[0.0, 0.0, 10.0], [1.0, 0.0, 10.0], [50.0, 0.0, 10.0]]),
        log_scales=torch.zeros(3, 3, dtype=DTYPE),
        def_logits=as_tensor([float(logit(0.2)), float(logit(0.6)), float(logit(0.6))]),
    )
    gmap.rebuild_neighbors(k=1)
    terms = smoothness_regularizers(gmap)
    assert set(terms) == {"temporal", "spatial", "residual_reg", "residual_temporal"}
    assert float(terms["temporal"]) == 0.0, "no previous probabilities"
    assert float(terms["residual_reg"]) == 0.0
    # edges 0-1 and 1-2 in both directions
    assert math.isclose(float(terms["spatial"]), 2 * 0.4**2, rel_tol=1e-9)

    gmap.bases["mean"].append([0, 1], 0.5, 0.1)
    residuals = FrameResiduals.allocate(gmap.bases, 0.5, torch.ones(3, dtype=torch.bool))
    residuals.values["mean"] = torch.ones(2, 3, dtype=DTYPE)
    previous = torch.full((3,), 0.5, dtype=DTYPE)
    terms = smoothness_regularizers(gmap, previous, residuals, None)
    assert math.isclose(float(terms["temporal"]), 0.3**2 + 2 * 0.1**2, rel_tol=1e-9)
    assert float(terms["residual_reg"]) == 6.0
    assert float(terms["residual_temporal"]) == 6.0, "without a previous frame the change is the magnitude"

    with pytest.raises(ShapeMismatch):
        smoothness_regularizers(gmap, previous[:2])
