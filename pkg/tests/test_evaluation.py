import math

import numpy as np
import pytest
import torch

from nrslam.evaluation import align, ate, psnr, ssim
from nrslam.geometry import DTYPE, Pose, as_tensor, se3_exp, so3_exp
from nrslam.utils.exceptions import LengthMismatch, ShapeMismatch


def circle(n: int = 12, radius: float = 20.0):
    return [
        Pose(so3_exp(as_tensor([0.0, 0.1 * i, 0.0])), as_tensor([radius * math.cos(i / 3), radius * math.sin(i / 3), 0.5 * i]))
        for i in range(n)
    ]


def test_ate_of_identical_trajectories_is_zero():
    poses = circle()
    metrics = ate(poses, poses)
    assert metrics.rmse < 1e-12 and metrics.sd < 1e-12


@pytest.mark.parametrize("mode", ["rigid", "similarity"])
def test_ate_ignores_a_global_rigid_transform(mode):
    poses = circle()
    offset = se3_exp([0.3, -0.2, 0.5, 10.0, -4.0, 7.0])
    moved = [offset.compose(p) for p in poses]
    assert ate(moved, poses, mode).rmse < 1e-9


def test_similarity_alignment_recovers_scale():
    poses = circle()
    scaled = [Pose(p.rotation, 2.5 * p.translation) for p in poses]
    assert ate(scaled, poses, "rigid").rmse > 1.0
    assert ate(scaled, poses, "similarity").rmse < 1e-9


def test_align_returns_a_proper_rotation():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(30, 3)) * 10
    mirrored = data * np.array([1.0, 1.0, -1.0])
    R, t, s = align(mirrored, data)
    assert s == 1.0
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert math.isclose(np.linalg.det(R), 1.0, abs_tol=1e-12), "reflections are never returned"


def test_ate_length_checks():
    poses = circle(4)
    with pytest.raises(LengthMismatch):
        ate(poses, poses[:3])
    with pytest.raises(LengthMismatch):
        ate(poses[:1], poses[:1])


@pytest.mark.parametrize(
    "offset, expected",
    [(0.0, 99.0), (0.1, 20.0), (1.0, 0.0), (0.01, 40.0)],
)
def test_psnr_values(offset, expected):
    a = torch.zeros(8, 8, 3, dtype=DTYPE)
    assert math.isclose(psnr(a, a + offset), expected, abs_tol=1e-9), f"PSNR at error {offset}"


def test_ssim_of_inverted_texture_is_negative():
    image = torch.rand(32, 32, 3, dtype=DTYPE, generator=torch.Generator().manual_seed(3))
    assert math.isclose(ssim(image, image), 1.0, abs_tol=1e-9)
    assert ssim(image, 1 - image) < 0


def test_image_metrics_reject_shape_mismatch():
    a, b = torch.zeros(8, 8, 3, dtype=DTYPE), torch.zeros(8, 9, 3, dtype=DTYPE)
    with pytest.raises(ShapeMismatch):
        psnr(a, b)
    with pytest.raises(ShapeMismatch):
        ssim(a, b)
