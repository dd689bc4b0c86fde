"""Rigid-body poses, pinhole intrinsics and the SE(3) exponential map.

Poses are camera-to-world transforms: a camera-frame point ``x_c`` maps to the world as
``R @ x_c + t``. Quaternions are stored scalar-last ``(x, y, z, w)`` so they can be written
straight into TUM trajectory lines. Everything is float64 torch so that poses can carry
autograd graphs during optimization.
"""

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from nrslam.utils.exceptions import BehindCamera, NonPositiveDepth, OutOfRange

DTYPE = torch.float64
PROJECTION_MIN_Z = 1e-6
# theta^2 below which the Taylor branches of exp/log are used
SMALL_ANGLE_SQ = 1e-10

TensorLike = Union[torch.Tensor, np.ndarray, list, tuple]


def as_tensor(x: TensorLike) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise OutOfRange(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not 0 <= self.cx < self.width or not 0 <= self.cy < self.height:
            raise OutOfRange(
                f"Principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    @property
    def matrix(self) -> torch.Tensor:
        return as_tensor([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def pixel_grid(self) -> torch.Tensor:
        """(H, W, 2) tensor of pixel centers ``(u, v)``; centers sit on integer coordinates."""
        v, u = torch.meshgrid(
            torch.arange(self.height, dtype=DTYPE), torch.arange(self.width, dtype=DTYPE), indexing="ij"
        )
        return torch.stack([u, v], dim=-1)

    @classmethod
    def from_file(cls, path: str) -> "Intrinsics":
        with open(path, "r") as f:
            values = f.read().split()
        if len(values) != 6:
            raise OutOfRange(f"Intrinsics file {path!r} must hold `fx fy cx cy width height`")
        fx, fy, cx, cy = (float(v) for v in values[:4])
        return cls(fx, fy, cx, cy, int(float(values[4])), int(float(values[5])))

    def to_file(self, path: str):
        with open(path, "w") as f:
            f.write(f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r} {self.width} {self.height}\n")


def hat(omega: torch.Tensor) -> torch.Tensor:
    """Skew-symmetric matrix of a (..., 3) vector."""
    x, y, z = omega.unbind(-1)
    zero = torch.zeros_like(x)
    return torch.stack(
        [
            torch.stack([zero, -z, y], dim=-1),
            torch.stack([z, zero, -x], dim=-1),
            torch.stack([-y, x, zero], dim=-1),
        ],
        dim=-2,
    )


def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    return q / torch.linalg.norm(q, dim=-1, keepdim=True)


def quat_multiply(q1: torch.Tensor, q2: torch.Tensor) -> torch.Tensor:
    v1, w1 = q1[..., :3], q1[..., 3:]
    v2, w2 = q2[..., :3], q2[..., 3:]
    w = w1 * w2 - (v1 * v2).sum(-1, keepdim=True)
    v = w1 * v2 + w2 * v1 + torch.linalg.cross(v1, v2, dim=-1)
    return torch.cat([v, w], dim=-1)


def quat_conjugate(q: torch.Tensor) -> torch.Tensor:
    return torch.cat([-q[..., :3], q[..., 3:]], dim=-1)


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices of (..., 4) quaternions ``(x, y, z, w)``; input is normalized first."""
    x, y, z, w = quat_normalize(q).unbind(-1)
    return torch.stack(
        [
            torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1),
            torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1),
            torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1),
        ],
        dim=-2,
    )


def _theta_terms(omega: torch.Tensor):
    """Returns theta^2, a mask of the small-angle entries and a theta safe to divide by."""
    theta_sq = (omega * omega).sum(-1)
    small = theta_sq < SMALL_ANGLE_SQ
    theta = torch.sqrt(torch.where(small, torch.ones_like(theta_sq), theta_sq))
    return theta_sq, small, theta


def so3_exp(omega: torch.Tensor) -> torch.Tensor:
    """Axis-angle (..., 3) to unit quaternion (..., 4)."""
    theta_sq, small, theta = _theta_terms(omega)
    half_sin = torch.where(small, 0.5 - theta_sq / 48.0, torch.sin(theta / 2) / theta)
    half_cos = torch.where(small, 1.0 - theta_sq / 8.0, torch.cos(theta / 2))
    return torch.cat([half_sin.unsqueeze(-1) * omega, half_cos.unsqueeze(-1)], dim=-1)


def so3_log(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternion (..., 4) to axis-angle (..., 3) with angle in [0, pi]."""
    q = quat_normalize(q)
    q = torch.where(q[..., 3:] < 0, -q, q)
    v, w = q[..., :3], q[..., 3]
    v_norm_sq = (v * v).sum(-1)
    small = v_norm_sq < SMALL_ANGLE_SQ
    v_norm = torch.sqrt(torch.where(small, torch.ones_like(v_norm_sq), v_norm_sq))
    theta = 2.0 * torch.atan2(v_norm, w)
    # 2/w * (1 - |v|^2 / (3 w^2)) is the series of 2 atan(|v|/w) / |v|
    scale = torch.where(small, 2.0 / w * (1.0 - v_norm_sq / (3.0 * w * w)), theta / v_norm)
    return scale.unsqueeze(-1) * v


def left_jacobian(omega: torch.Tensor) -> torch.Tensor:
    """The V matrix mapping the translational twist part to the pose translation."""
    theta_sq, small, theta = _theta_terms(omega)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / theta**2)
    c = torch.where(small, 1.0 / 6.0 - theta_sq / 120.0, (theta - torch.sin(theta)) / theta**3)
    omega_hat = hat(omega)
    eye = torch.eye(3, dtype=omega.dtype).expand(omega_hat.shape)
    return eye + b[..., None, None] * omega_hat + c[..., None, None] * (omega_hat @ omega_hat)


@dataclass(eq=False)
class Pose:
    """Camera-to-world rigid transform: unit quaternion ``(x, y, z, w)`` plus translation in mm."""

    rotation: torch.Tensor
    translation: torch.Tensor

    def __post_init__(self):
        self.rotation = quat_normalize(as_tensor(self.rotation))
        self.translation = as_tensor(self.translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(as_tensor([0.0, 0.0, 0.0, 1.0]), torch.zeros(3, dtype=DTYPE))

    @classmethod
    def from_matrix(cls, matrix: TensorLike) -> "Pose":
        matrix = np.asarray(torch.as_tensor(matrix).detach().cpu(), dtype=np.float64)
        quat = Rotation.from_matrix(matrix[:3, :3]).as_quat()
        return cls(as_tensor(quat), as_tensor(matrix[:3, 3]))

    @property
    def rotation_matrix(self) -> torch.Tensor:
        return quat_to_rotmat(self.rotation)

    def as_matrix(self) -> torch.Tensor:
        top = torch.cat([self.rotation_matrix, self.translation.unsqueeze(-1)], dim=-1)
        bottom = as_tensor([[0.0, 0.0, 0.0, 1.0]])
        return torch.cat([top, bottom], dim=0)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(
            quat_multiply(self.rotation, other.rotation),
            self.rotation_matrix @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rotation_t = self.rotation_matrix.transpose(-1, -2)
        return Pose(quat_conjugate(self.rotation), -(rotation_t @ self.translation))

    def transform(self, points: torch.Tensor) -> torch.Tensor:
        """Applies the transform to (..., 3) points."""
        return as_tensor(points) @ self.rotation_matrix.transpose(-1, -2) + self.translation

    def retract(self, xi: torch.Tensor) -> "Pose":
        """Left-multiplied perturbation ``exp(xi) ∘ self``."""
        return se3_exp(xi).compose(self)

    def detach(self) -> "Pose":
        return Pose(self.rotation.detach().clone(), self.translation.detach().clone())

    def translation_distance(self, other: "Pose") -> float:
        return float(torch.linalg.norm(self.translation - other.translation))

    def rotation_angle(self, other: "Pose") -> float:
        """Geodesic angle between the two rotations in radians."""
        relative = quat_multiply(quat_conjugate(other.rotation), self.rotation)
        return float(torch.linalg.norm(so3_log(relative.detach())))

    def to_tum(self, timestamp: float) -> str:
        values = [timestamp, *self.translation.tolist(), *self.rotation.tolist()]
        return " ".join(f"{v:.9f}" for v in values)

    @classmethod
    def from_tum(cls, fields) -> Tuple[float, "Pose"]:
        values = [float(f) for f in fields]
        return values[0], cls(as_tensor(values[4:8]), as_tensor(values[1:4]))


def se3_exp(xi: TensorLike) -> Pose:
    """Twist ``(omega; v)`` (radians; mm) to pose."""
    xi = as_tensor(xi)
    omega, v = xi[..., :3], xi[..., 3:]
    return Pose(so3_exp(omega), left_jacobian(omega) @ v)


def se3_log(pose: Pose) -> torch.Tensor:
    omega = so3_log(pose.rotation)
    v = torch.linalg.solve(left_jacobian(omega), pose.translation)
    return torch.cat([omega, v], dim=-1)


def project_points(K: Intrinsics, T: Pose, X: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Projects (..., 3) world points; returns pixels (..., 2) and camera depths (...) without checks."""
    cam = T.inverse().transform(X)
    z = cam[..., 2]
    u = K.fx * cam[..., 0] / z + K.cx
    v = K.fy * cam[..., 1] / z + K.cy
    return torch.stack([u, v], dim=-1), z


def project(K: Intrinsics, T: Pose, X: TensorLike) -> torch.Tensor:
    pixels, z = project_points(K, T, as_tensor(X))
    if bool((z <= PROJECTION_MIN_Z).any()):
        raise BehindCamera(f"Camera-frame depth {z.min().item():.3e} <= {PROJECTION_MIN_Z}")
    return pixels


def backproject(K: Intrinsics, u: TensorLike, d: TensorLike, T: Pose) -> torch.Tensor:
    """Lifts pixels (..., 2) at depths (...) in mm to world points (..., 3)."""
    u, d = as_tensor(u), as_tensor(d)
    if bool((d <= 0).any()):
        raise NonPositiveDepth(f"Depth must be positive, got {d.min().item()}")
    x = (u[..., 0] - K.cx) / K.fx * d
    y = (u[..., 1] - K.cy) / K.fy * d
    return T.transform(torch.stack([x, y, d], dim=-1))


def predict_constant_velocity(previous: Pose, current: Pose) -> Pose:
    """Extrapolates one step: ``current ∘ (previous^-1 ∘ current)``."""
    return current.compose(previous.inverse().compose(current))
