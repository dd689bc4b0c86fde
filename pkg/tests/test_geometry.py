import math

import numpy as np
import pytest
import torch

from nrslam.geometry import (
    Intrinsics,
    Pose,
    as_tensor,
    backproject,
    predict_constant_velocity,
    project,
    se3_exp,
    se3_log,
    so3_exp,
    so3_log,
)
from nrslam.utils.exceptions import BehindCamera, NonPositiveDepth, OutOfRange

from .fixtures.scenes import small_intrinsics

TWISTS = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.1, -0.2, 0.3, 1.0, 2.0, -3.0],
    [1e-7, 0.0, -1e-7, 0.5, 0.0, 0.0],
    [0.0, 0.0, 3.0, 0.0, 10.0, 0.0],
]


@pytest.mark.parametrize("xi", TWISTS)
def test_se3_log_inverts_exp(xi):
    recovered = se3_log(se3_exp(xi))
    assert torch.allclose(recovered, as_tensor(xi), atol=1e-9), f"log(exp(xi)) = {recovered.tolist()} for xi = {xi}"


@pytest.mark.parametrize("xi", [TWISTS[1], TWISTS[3]])
def test_se3_exp_gradients(xi):
    twist = as_tensor(xi).clone().requires_grad_(True)
    assert torch.autograd.gradcheck(lambda v: se3_exp(v).as_matrix(), (twist,), eps=1e-6, atol=1e-7)


def test_so3_small_angle_branch_is_continuous():
    tiny, small = so3_exp(as_tensor([1e-6, 0.0, 0.0])), so3_exp(as_tensor([1e-4, 0.0, 0.0]))
    assert torch.allclose(tiny, as_tensor([0.5e-6, 0.0, 0.0, 1.0]), atol=1e-12)
    assert torch.allclose(so3_log(small), as_tensor([1e-4, 0.0, 0.0]), atol=1e-14)


def test_so3_log_uses_shortest_rotation():
    q = so3_exp(as_tensor([0.0, 0.0, 0.5]))
    assert torch.allclose(so3_log(-q), so3_log(q), atol=1e-12), "q and -q are the same rotation"


def test_pose_compose_inverse_is_identity():
    pose = se3_exp(TWISTS[1])
    product = pose.compose(pose.inverse())
    assert torch.allclose(product.as_matrix(), torch.eye(4, dtype=torch.float64), atol=1e-12)


def test_pose_matrix_round_trip():
    pose = se3_exp(TWISTS[3])
    again = Pose.from_matrix(pose.as_matrix())
    assert torch.allclose(again.as_matrix(), pose.as_matrix(), atol=1e-12)


def test_retract_is_left_multiplication():
    base, xi = se3_exp(TWISTS[1]), as_tensor([0.01, 0.02, -0.03, 0.1, 0.0, 0.2])
    assert torch.allclose(base.retract(xi).as_matrix(), se3_exp(xi).as_matrix() @ base.as_matrix(), atol=1e-12)


def test_project_backproject_round_trip():
    K = small_intrinsics()
    pose = se3_exp([0.05, -0.02, 0.01, 1.0, -2.0, 0.5])
    pixels = as_tensor([[0.0, 0.0], [7.5, 5.5], [15.0, 11.0]])
    depth = as_tensor([10.0, 40.0, 123.0])
    points = backproject(K, pixels, depth, pose)
    assert torch.allclose(project(K, pose, points), pixels, atol=1e-9)


def test_project_rejects_points_behind_camera():
    with pytest.raises(BehindCamera):
        project(small_intrinsics(), Pose.identity(), as_tensor([[0.0, 0.0, -1.0]]))


def test_backproject_rejects_non_positive_depth():
    with pytest.raises(NonPositiveDepth):
        backproject(small_intrinsics(), as_tensor([[1.0, 1.0]]), as_tensor([0.0]), Pose.identity())


@pytest.mark.parametrize(
    "fx, cx, width",
    [(0.0, 5.0, 16), (-1.0, 5.0, 16), (10.0, 16.0, 16), (10.0, -0.5, 16)],
)
def test_intrinsics_validation(fx, cx, width):
    with pytest.raises(OutOfRange):
        Intrinsics(fx, 10.0, cx, 5.0, width, 12)


def test_constant_velocity_extrapolates_one_step():
    step = se3_exp([0.0, 0.01, 0.0, 1.0, 0.0, 0.0])
    previous = Pose.identity()
    current = previous.compose(step)
    predicted = predict_constant_velocity(previous, current)
    assert torch.allclose(predicted.as_matrix(), current.compose(step).as_matrix(), atol=1e-12)


def test_pose_distances():
    a = Pose.identity()
    b = Pose(so3_exp(as_tensor([0.0, 0.0, 0.3])), as_tensor([3.0, 4.0, 0.0]))
    assert math.isclose(a.translation_distance(b), 5.0, abs_tol=1e-12)
    assert math.isclose(a.rotation_angle(b), 0.3, abs_tol=1e-12)


def test_tum_round_trip():
    pose = se3_exp(TWISTS[1])
    timestamp, parsed = Pose.from_tum(pose.to_tum(1.5).split())
    assert timestamp == 1.5
    assert np.allclose(parsed.as_matrix().numpy(), pose.as_matrix().numpy(), atol=1e-8)
