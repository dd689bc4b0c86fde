import numpy as np
import pytest
import torch

from nrslam.geometry import DTYPE, Intrinsics, Pose, as_tensor, project, se3_exp
from nrslam.gaussians import FrameResiduals
from nrslam.objectives import ObjectivePipeline, TrackPrediction
from nrslam.renderer import render_frame
from nrslam.tracking import (
    Correspondences,
    FrameState,
    Tracker,
    TrajectoryStore,
    allocate_residuals,
    coarse_pose,
    estimate_frame_deformation,
    keyframe_decision,
    refine_pose,
    relative_residual_ratio,
    weighted_pnp,
)
from nrslam.utils.exceptions import DegenerateGeometry

from .fixtures.scenes import make_config, plane_frame, plane_map, small_intrinsics


@pytest.mark.parametrize(
    "kwargs, reason",
    [
        (dict(covis_ratio=0.5, rdef=0.0, translation=0.0, frames_since=1), "covis"),
        (dict(covis_ratio=0.9, rdef=0.2, translation=0.0, frames_since=1), "deformation"),
        (dict(covis_ratio=0.9, rdef=0.0, translation=9.0, frames_since=1), "motion"),
        (dict(covis_ratio=0.9, rdef=0.0, translation=0.0, frames_since=21), "interval"),
        # every reason fires, the first one is reported
        (dict(covis_ratio=0.1, rdef=1.0, translation=50.0, frames_since=99), "covis"),
        (dict(covis_ratio=0.9, rdef=1.0, translation=50.0, frames_since=99), "deformation"),
    ],
)
def test_keyframe_reasons(kwargs, reason):
    decision = keyframe_decision(**kwargs)
    assert decision.is_keyframe
    assert decision.reason == reason, f"Expected {reason} but got {decision.reason}"


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(covis_ratio=0.75, rdef=0.1, translation=8.0, frames_since=20),
        dict(covis_ratio=1.0, rdef=0.0, translation=0.0, frames_since=0),
    ],
)
def test_thresholds_are_strict(kwargs):
    decision = keyframe_decision(**kwargs)
    assert not decision.is_keyframe
    assert decision.reason == ""


def test_relative_residual_ratio():
    K = small_intrinsics()
    gmap = plane_map(K, def_prob=0.3)
    n = len(gmap)
    gmap.bases["mean"].append(torch.arange(n), 0.5, 0.2, weight=torch.full((n, 3), 1.0, dtype=DTYPE))
    residuals = allocate_residuals(gmap, 0.5, eps_def=0.5, full_update=True)
    residuals.values["mean"] = torch.full_like(residuals.values["mean"], 1.0)
    assert relative_residual_ratio(gmap, residuals) == 0.0, "no deformable primitive"

    gmap.set_deformation_probability(torch.arange(n), 0.9)
    ratio = relative_residual_ratio(gmap, residuals, eps=0.05)
    expected = np.sqrt(3) / (np.sqrt(3) + 0.05)
    assert np.isclose(ratio, expected, rtol=1e-12)
    assert relative_residual_ratio(gmap, None) == 0.0


def test_allocate_residuals_follows_probability_threshold():
    K = small_intrinsics()
    gmap = plane_map(K, def_prob=0.3)
    n = len(gmap)
    gmap.bases["mean"].append(torch.arange(n), 0.5, 0.2)
    gmap.set_deformation_probability([0, 1], 0.8)
    residuals = allocate_residuals(gmap, 0.5, eps_def=0.5)
    assert len(residuals.uids["mean"]) == 2
    assert len(allocate_residuals(gmap, 0.5, eps_def=0.5, full_update=True).uids["mean"]) == n


def synthetic_correspondences(n: int = 40, outliers: int = 0, seed: int = 0):
    rng = np.random.default_rng(seed)
    K = Intrinsics(500.0, 500.0, 319.5, 239.5, 640, 480)
    pose = se3_exp([0.05, -0.1, 0.02, 3.0, -1.0, 2.0])
    cam = np.stack([rng.uniform(-20, 20, n), rng.uniform(-15, 15, n), rng.uniform(40, 80, n)], axis=-1)
    world = pose.transform(as_tensor(cam))
    pixels = project(K, pose, world).numpy()
    pixels[:outliers] += 50.0
    corr = Correspondences(world.numpy(), pixels, np.ones(n))
    return corr, K, pose


def test_weighted_pnp_recovers_pose_despite_outliers():
    corr, K, pose = synthetic_correspondences(outliers=8)
    estimate, inliers = weighted_pnp(corr, K, np.random.default_rng(1), threshold=2.0, max_iters=500)
    assert estimate.translation_distance(pose) < 1e-4, f"translation error {estimate.translation_distance(pose)}"
    assert estimate.rotation_angle(pose) < 1e-6
    assert not inliers[:8].any() and inliers[8:].all()


def test_weighted_pnp_ignores_uniform_weight_scaling():
    corr, K, _ = synthetic_correspondences(n=80, outliers=6, seed=3)
    rng = np.random.default_rng(7)
    corr.pixels = corr.pixels + rng.normal(0.0, 0.8, corr.pixels.shape)
    corr.weights = rng.uniform(0.05, 1.0, len(corr))
    scaled = Correspondences(corr.world, corr.pixels, 100.0 * corr.weights)

    first, first_inliers = weighted_pnp(corr, K, np.random.default_rng(1))
    second, second_inliers = weighted_pnp(scaled, K, np.random.default_rng(1))
    assert np.array_equal(first_inliers, second_inliers)
    diff = (first.as_matrix() - second.as_matrix()).abs().max()
    assert float(diff) < 1e-6, f"pose moved by {float(diff)} under weight scaling"


def test_weighted_pnp_needs_six_correspondences():
    corr, K, _ = synthetic_correspondences(n=5)
    with pytest.raises(DegenerateGeometry):
        weighted_pnp(corr, K, np.random.default_rng(0))


def test_coarse_pose_falls_back_to_prediction():
    corr, K, _ = synthetic_correspondences(n=3)
    prediction = se3_exp([0.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    pose, ratio, status = coarse_pose(corr, K, np.random.default_rng(0), prediction)
    assert status == "fallback"
    assert ratio == 0.0
    assert pose is prediction


def test_coarse_pose_reports_inlier_ratio():
    corr, K, pose = synthetic_correspondences(n=20, outliers=5)
    estimate, ratio, status = coarse_pose(corr, K, np.random.default_rng(0), Pose.identity())
    assert status == "ok"
    assert np.isclose(ratio, 0.75)


def test_refine_pose_lowers_photometric_loss():
    K = small_intrinsics()
    gmap = plane_map(K)
    with torch.no_grad():
        image = render_frame(gmap, 0.0, K, Pose.identity()).rgb
    frame = plane_frame(K, image)
    initial = se3_exp([0.0, 0.0, 0.0, 0.5, -0.3, 0.0])
    result = refine_pose(
        gmap,
        frame,
        initial,
        None,
        TrackPrediction.empty(),
        ObjectivePipeline([dict(name="photometric", weight=1.0)]),
        iters=10,
        lr_rotation=1e-4,
        lr_translation=0.05,
    )
    assert result.loss_end < result.loss_start
    assert result.pose.translation_distance(Pose.identity()) < initial.translation_distance(Pose.identity())


def test_trajectory_store_order_and_keyframes():
    store = TrajectoryStore()
    for index in (2, 0, 1):
        store.add(FrameState(index, index / 2, float(index), Pose.identity(), FrameResiduals.empty(index / 2), is_keyframe=index != 1))
    assert [s.index for s in store] == [0, 1, 2]
    assert [s.index for s in store.last(2)] == [1, 2]
    assert store.last_keyframe().index == 2
    assert 1 in store and 5 not in store


def test_tracker_step_on_a_static_view(tmp_path):
    K = small_intrinsics()
    gmap = plane_map(K)
    with torch.no_grad():
        image = render_frame(gmap, 0.0, K, Pose.identity()).rgb
    cfg = make_config(str(tmp_path), {"masks.use_validity": False})
    store = TrajectoryStore()
    store.add(FrameState(0, 0.0, 0.0, Pose.identity(), FrameResiduals.empty(0.0), is_keyframe=True, bundle=plane_frame(K, image)))
    result = Tracker(cfg, store).track_frame(gmap, plane_frame(K, image, index=1, time=0.5))

    assert result.pnp_status == "fallback", "a frame without tracks cannot run PnP"
    assert result.pose.translation_distance(Pose.identity()) < 0.05
    # no tracks means an empty track hull, so nothing is co-visible
    assert result.decision.reason == "covis"
    assert 1 in store and store[1].is_keyframe


def test_frame_deformation_fits_a_shifted_surface():
    K = small_intrinsics()
    moved = plane_map(K, def_prob=0.9)
    n = len(moved)
    moved.bases["mean"].append(torch.arange(n), 0.5, 0.2, weight=as_tensor([[1.0, 0.0, 0.0]]).repeat(n, 1))
    with torch.no_grad():
        image = render_frame(moved, 0.5, K, Pose.identity()).rgb
    gmap = plane_map(K, def_prob=0.9)
    gmap.bases["mean"].append(torch.arange(n), 0.5, 0.2)
    checksum = gmap.checksum()

    result = estimate_frame_deformation(
        gmap,
        plane_frame(K, image, index=2, time=0.5),
        Pose.identity(),
        None,
        lambda residuals: TrackPrediction.empty(),
        ObjectivePipeline([dict(name="photometric", weight=1.0)]),
        iters=10,
        lr=0.1,
    )
    assert len(result.residuals.uids["mean"]) == n
    assert result.loss_end < result.loss_start
    assert not result.residuals.values["mean"].requires_grad, "the returned residuals are detached"
    assert gmap.checksum() == checksum, "canonical attributes and bases stay untouched"


def test_frame_deformation_skips_rigid_maps():
    K = small_intrinsics()
    gmap = plane_map(K, def_prob=0.3)
    gmap.bases["mean"].append(torch.arange(len(gmap)), 0.5, 0.2)
    frame = plane_frame(K, torch.zeros(K.height, K.width, 3, dtype=DTYPE), time=0.5)
    result = estimate_frame_deformation(
        gmap, frame, Pose.identity(), None, lambda r: TrackPrediction.empty(), ObjectivePipeline([dict(name="photometric", weight=1.0)]), 5, 0.1
    )
    assert len(result.residuals) == 0
    assert result.loss_start is None
