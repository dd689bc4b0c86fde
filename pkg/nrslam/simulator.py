"""Synthetic deformable sequences with full ground truth.

The scene is a textured height-field surface in front of the camera, covered by one
Gaussian primitive per grid cell. Part of the surface moves along the world z axis following
a sum of travelling sinusoids, the rest stays rigid. Frames are rendered with the project's
own rasterizer, so a perfect estimate reaches zero photometric error.
"""

import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from loguru import logger
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import cKDTree
from scipy.stats import rankdata
from tqdm import tqdm

from nrslam.geometry import DTYPE, Intrinsics, Pose, as_tensor, project_points, so3_exp
from nrslam.gaussians import GaussianSet
from nrslam.priors import Priors, PriorNoise, Tracks, perturb_priors
from nrslam.priors.files import write_depth, write_image, write_tracks, write_trajectory
from nrslam.renderer import render
from nrslam.utils.exceptions import InvalidSpec
from nrslam.utils.misc import frame_rng

DEFORM_REGIONS = ("none", "left", "right", "all", "disc")
TRAJECTORIES = ("static", "arc", "line")
MIN_FRAMES = 7
SCALE_FACTOR = 0.6
SURFACE_OPACITY = 0.98
# depth is only reported where the surface is this opaque
MIN_COVERAGE = 0.5
SATURATION_SIZE = 6
RELIEF_WAVES = 4
SATURATION_KEY = 1_000_003


@dataclass
class SceneSpec:
    """Plain-text scene description; every field is a ``key = value`` line of a spec file."""

    grid: int = 64
    extent_x: float = 140.0
    extent_y: float = 100.0
    depth: float = 70.0
    relief: float = 3.0
    texture_seed: int = 0
    texture_octaves: int = 4
    deform_region: str = "right"
    amplitude: float = 2.0
    spatial_frequency: float = 0.05
    temporal_frequency: float = 0.02
    waves: int = 1
    trajectory: str = "arc"
    arc_length: float = 40.0
    frames: int = 120
    width: int = 160
    height: int = 128
    fx: float = 120.0
    fy: float = 120.0
    depth_noise: float = 0.0
    track_noise_px: float = 0.0
    track_noise_mm: float = 0.0
    track_grid: int = 6
    # written track files restart every `track_reseed` frames; the oracle provider re-seeds on keyframes
    track_reseed: int = 10
    saturation_patches: int = 0
    black_frames: List[int] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.grid < 2:
            raise InvalidSpec(f"grid must be at least 2, got {self.grid}")
        for name in ("extent_x", "extent_y", "depth", "fx", "fy", "spatial_frequency"):
            if getattr(self, name) <= 0:
                raise InvalidSpec(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("relief", "amplitude", "temporal_frequency", "arc_length", "depth_noise", "track_noise_px", "track_noise_mm"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.relief >= self.depth:
            raise InvalidSpec(f"relief {self.relief} must stay below the surface depth {self.depth}")
        if self.deform_region not in DEFORM_REGIONS:
            raise InvalidSpec(f"Unknown deform_region {self.deform_region!r}. Please choose from {DEFORM_REGIONS}")
        if self.trajectory not in TRAJECTORIES:
            raise InvalidSpec(f"Unknown trajectory {self.trajectory!r}. Please choose from {TRAJECTORIES}")
        if self.frames < MIN_FRAMES:
            raise InvalidSpec(f"A sequence needs at least {MIN_FRAMES} frames, got {self.frames}")
        if self.width < 8 or self.height < 8:
            raise InvalidSpec(f"Image size {self.width}x{self.height} is too small")
        if self.waves < 1 or self.texture_octaves < 1 or self.track_grid < 1 or self.track_reseed < 1:
            raise InvalidSpec("waves, texture_octaves, track_grid and track_reseed must be at least 1")
        if self.saturation_patches < 0:
            raise InvalidSpec(f"saturation_patches must be non-negative, got {self.saturation_patches}")
        if any(not 0 <= f < self.frames for f in self.black_frames):
            raise InvalidSpec(f"black_frames {self.black_frames} outside the {self.frames} frames")

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, (self.width - 1) / 2, (self.height - 1) / 2, self.width, self.height)

    @property
    def noise(self) -> PriorNoise:
        return PriorNoise(self.depth_noise, self.track_noise_px, self.track_noise_mm)

    @classmethod
    def from_file(cls, path: str, **overrides) -> "SceneSpec":
        if not os.path.exists(path):
            raise InvalidSpec(f"Scene spec {path!r} not found")
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        with open(path, "r") as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise InvalidSpec(f"{path}:{lineno}: expected `key = value`, got {line!r}")
                key, value = (s.strip() for s in line.split("=", 1))
                if key not in types:
                    raise InvalidSpec(f"{path}:{lineno}: unknown scene key {key!r}")
                values[key] = _parse(types[key], value, f"{path}:{lineno}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_file(self, path: str):
        with open(path, "w") as f:
            for key, value in asdict(self).items():
                if isinstance(value, list):
                    value = ",".join(str(v) for v in value)
                f.write(f"{key} = {value}\n")


def _parse(kind, value: str, where: str):
    try:
        if kind in (int, "int"):
            return int(value)
        if kind in (float, "float"):
            return float(value)
        if kind in (str, "str"):
            return value
        return [int(v) for v in value.replace(",", " ").split()]
    except ValueError as e:
        raise InvalidSpec(f"{where}: cannot parse {value!r}: {e}")


def frame_time(index: int, frames: int) -> float:
    return index / max(frames - 1, 1)


def track_anchor(index: int, reseed: int) -> int:
    """Start frame of the tracks written for ``index``: the last reseed frame strictly before it."""
    if index == 0:
        return 0
    return ((index - 1) // reseed) * reseed


def trajectory(spec: SceneSpec) -> List[Pose]:
    """Camera-to-world poses. The camera starts near the origin looking along +z at the surface."""
    poses = []
    for i in range(spec.frames):
        s = frame_time(i, spec.frames) - 0.5
        if spec.trajectory == "static" or spec.arc_length == 0:
            poses.append(Pose.identity())
            continue
        if spec.trajectory == "line":
            theta = 0.0
            position = as_tensor([s * spec.arc_length, 0.25 * s * spec.arc_length, 0.0])
        else:
            radius = spec.arc_length
            theta = s * spec.arc_length / radius
            position = as_tensor([radius * math.sin(theta), radius * (1 - math.cos(theta)), 0.1 * radius * theta])
        rotation = so3_exp(as_tensor([0.05 * theta, -0.15 * theta, 0.1 * theta]))
        poses.append(Pose(rotation, position))
    return poses


class GroundTruth:
    """Analytic scene of a SceneSpec: surface points, their motion, camera poses, renders and priors."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.intrinsics = spec.intrinsics
        self.poses = trajectory(spec)
        rng = np.random.default_rng([spec.texture_seed, spec.seed])

        xs = np.linspace(-spec.extent_x / 2, spec.extent_x / 2, spec.grid)
        ys = np.linspace(-spec.extent_y / 2, spec.extent_y / 2, spec.grid)
        self.spacing = float(max(xs[1] - xs[0], ys[1] - ys[0]))
        gx, gy = np.meshgrid(xs, ys, indexing="xy")
        self.xy = np.stack([gx.ravel(), gy.ravel()], axis=-1)

        self._relief_k = rng.uniform(-1, 1, (RELIEF_WAVES, 2)) * 2 * math.pi / min(spec.extent_x, spec.extent_y)
        self._relief_phase = rng.uniform(0, 2 * math.pi, RELIEF_WAVES)
        directions = rng.uniform(0, 2 * math.pi, spec.waves)
        self._wave_k = np.stack([np.cos(directions), np.sin(directions)], axis=-1) * 2 * math.pi * spec.spatial_frequency
        self._wave_phase = rng.uniform(0, 2 * math.pi, spec.waves)

        self.colors = self._texture(rng)
        self.deforming = self.region(self.xy)
        self.rigid_labels = ~self.deforming if spec.amplitude > 0 else np.ones(len(self.xy), dtype=bool)
        self._cache: Dict[int, Tuple[torch.Tensor, torch.Tensor]] = {}

    def __len__(self):
        return self.spec.frames

    def __repr__(self):
        return f"GroundTruth(frames={len(self)}, points={len(self.xy)}, deforming={int(self.deforming.sum())})"

    def _texture(self, rng: np.random.Generator) -> np.ndarray:
        """Multi-octave value noise in RGB, rescaled to [0.15, 0.85]."""
        spec = self.spec
        u = (self.xy[:, 0] / spec.extent_x) + 0.5
        v = (self.xy[:, 1] / spec.extent_y) + 0.5
        colors = np.zeros((len(self.xy), 3))
        for octave in range(spec.texture_octaves):
            cells = 2 ** (octave + 2) + 1
            axis = np.linspace(0, 1, cells)
            lattice = rng.uniform(0, 1, (cells, cells, 3))
            colors += 0.5**octave * RegularGridInterpolator((axis, axis), lattice)(np.stack([v, u], axis=-1))
        low, high = colors.min(0), colors.max(0)
        return 0.15 + 0.7 * (colors - low) / np.maximum(high - low, 1e-12)

    def region(self, xy: np.ndarray) -> np.ndarray:
        kind = self.spec.deform_region
        if kind == "none":
            return np.zeros(len(xy), dtype=bool)
        if kind == "all":
            return np.ones(len(xy), dtype=bool)
        if kind == "left":
            return xy[:, 0] < 0
        if kind == "right":
            return xy[:, 0] >= 0
        radius = 0.25 * min(self.spec.extent_x, self.spec.extent_y)
        return np.linalg.norm(xy, axis=-1) < radius

    def relief(self, xy: np.ndarray) -> np.ndarray:
        return self.spec.relief / RELIEF_WAVES * np.sin(xy @ self._relief_k.T + self._relief_phase).sum(-1)

    def displacement(self, xy: np.ndarray, index: int) -> np.ndarray:
        """Motion of surface points along world z at frame ``index``: zero outside the deforming region."""
        spec = self.spec
        if spec.amplitude == 0:
            return np.zeros(len(xy))
        phase = xy @ self._wave_k.T - 2 * math.pi * spec.temporal_frequency * index + self._wave_phase
        return spec.amplitude / spec.waves * np.sin(phase).sum(-1) * self.region(xy)

    def surface(self, xy: np.ndarray, index: int) -> torch.Tensor:
        z = self.spec.depth + self.relief(xy) + self.displacement(xy, index)
        return as_tensor(np.concatenate([xy, z[:, None]], axis=-1))

    def points(self, index: int) -> torch.Tensor:
        return self.surface(self.xy, index)

    def gaussians(self, index: int) -> GaussianSet:
        n = len(self.xy)
        return GaussianSet(
            means=self.points(index),
            log_scales=torch.full((n, 3), math.log(SCALE_FACTOR * self.spacing), dtype=DTYPE),
            rotations=as_tensor([0.0, 0.0, 0.0, 1.0]).expand(n, 4).clone(),
            opacities=torch.full((n,), SURFACE_OPACITY, dtype=DTYPE),
            colors=as_tensor(self.colors),
            def_probs=as_tensor(self.deforming.astype(np.float64)),
        )

    def time(self, index: int) -> float:
        return frame_time(index, self.spec.frames)

    def render(self, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        """Clean RGB and metric depth (0 where the surface does not cover the pixel)."""
        if index not in self._cache:
            with torch.no_grad():
                out = render(self.gaussians(index), self.intrinsics, self.poses[index], channels={"rgb", "depth"})
            coverage = 1 - out.transmittance
            depth = torch.where(coverage > MIN_COVERAGE, out.depth / coverage.clamp(min=MIN_COVERAGE), torch.zeros_like(out.depth))
            self._cache[index] = (out.rgb.clamp(0, 1), depth)
        return self._cache[index]

    def image(self, index: int) -> torch.Tensor:
        rgb = self.render(index)[0].clone()
        if index in self.spec.black_frames:
            return torch.zeros_like(rgb)
        if self.spec.saturation_patches:
            rng = frame_rng(self.spec.seed, SATURATION_KEY, index)
            H, W = rgb.shape[:2]
            for _ in range(self.spec.saturation_patches):
                v, u = int(rng.integers(0, H - SATURATION_SIZE)), int(rng.integers(0, W - SATURATION_SIZE))
                rgb[v : v + SATURATION_SIZE, u : u + SATURATION_SIZE] = 1.0
        return rgb

    def depth(self, index: int) -> torch.Tensor:
        return self.render(index)[1]

    def tracks(self, index: int, anchor: int) -> Tracks:
        """Ground-truth tracks from a pixel grid of ``anchor`` to ``index``.

        Grid pixels are lifted with the anchor depth to pick the material point under them;
        that point is then followed analytically, so 2D and 3D tracks agree exactly.
        """
        K, step = self.intrinsics, self.spec.track_grid
        depth = self.depth(anchor)
        v, u = torch.meshgrid(torch.arange(step // 2, K.height, step), torch.arange(step // 2, K.width, step), indexing="ij")
        u, v = u.reshape(-1), v.reshape(-1)
        ids = torch.arange(len(u))
        d = depth[v, u]
        keep = d > 0
        if not bool(keep.any()):
            return Tracks.empty()
        u, v, d, ids = u[keep].to(DTYPE), v[keep].to(DTYPE), d[keep], ids[keep]
        cam = torch.stack([(u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d], dim=-1)
        xy = self.poses[anchor].transform(cam)[:, :2].numpy()
        inside = (np.abs(xy[:, 0]) <= self.spec.extent_x / 2) & (np.abs(xy[:, 1]) <= self.spec.extent_y / 2)

        X0 = self.surface(xy, anchor)
        X = self.surface(xy, index)
        u0, z0 = project_points(K, self.poses[anchor], X0)
        u1, z1 = project_points(K, self.poses[index], X)
        visible = torch.as_tensor(inside) & (z0 > 0) & (z1 > 0) & _in_image(u0, K) & _in_image(u1, K)
        n_grid = int(keep.numel())
        return Tracks(
            ids=(ids + anchor * n_grid)[visible],
            start_frame=torch.full((int(visible.sum()),), anchor, dtype=torch.long),
            u0=u0[visible],
            u=u1[visible],
            x0=self.poses[anchor].inverse().transform(X0[visible]),
            x=self.poses[index].inverse().transform(X[visible]),
        )

    def priors(self, index: int, anchor: int) -> Priors:
        return Priors(depth=self.depth(index).clone(), tracks=self.tracks(index, anchor))

    def labels_table(self) -> np.ndarray:
        points = self.points(0).numpy()
        return np.concatenate([points, self.rigid_labels[:, None].astype(np.float64)], axis=-1)


def _in_image(pixels: torch.Tensor, K: Intrinsics) -> torch.Tensor:
    return (pixels[:, 0] >= 0) & (pixels[:, 0] <= K.width - 1) & (pixels[:, 1] >= 0) & (pixels[:, 1] <= K.height - 1)


def generate(spec: SceneSpec, out_dir: str) -> GroundTruth:
    """Writes the dataset layout of ``nrslam.priors.files`` plus ``rigid_labels.csv`` and ``spec.txt``.

    Prior noise of the spec is applied to the written depth and tracks only; the returned
    ground truth stays clean.
    """
    gt = GroundTruth(spec)
    for sub in ("rgb", "depth", "tracks"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    spec.to_file(os.path.join(out_dir, "spec.txt"))
    gt.intrinsics.to_file(os.path.join(out_dir, "intrinsics.txt"))
    timestamps = [float(i) for i in range(spec.frames)]
    write_trajectory(os.path.join(out_dir, "gt_traj.txt"), timestamps, gt.poses)
    np.savetxt(
        os.path.join(out_dir, "rigid_labels.csv"),
        gt.labels_table(),
        delimiter=",",
        fmt=["%.17g", "%.17g", "%.17g", "%d"],
        header="x,y,z,rigid",
        comments="",
    )

    noise = spec.noise
    for index in tqdm(range(spec.frames), desc="simulate", disable=spec.frames < 20):
        anchor = track_anchor(index, spec.track_reseed)
        priors = perturb_priors(gt.priors(index, anchor), noise, frame_rng(spec.seed, index, anchor))
        write_image(os.path.join(out_dir, "rgb", f"{index:06d}.png"), gt.image(index))
        write_depth(os.path.join(out_dir, "depth", f"{index:06d}.png"), priors.depth)
        write_tracks(os.path.join(out_dir, "tracks", f"{index:06d}.csv"), priors.tracks)
    logger.success(f"🧪 Wrote {spec.frames} frames of {gt} to {out_dir}")
    return gt


def load_ground_truth(dataset_dir: str) -> Optional[GroundTruth]:
    """Ground truth of a simulated dataset, or None for datasets without ``spec.txt``."""
    path = os.path.join(dataset_dir, "spec.txt")
    if not os.path.exists(path):
        return None
    return GroundTruth(SceneSpec.from_file(path))


def roc_auc(scores, positives) -> float:
    """Area under the ROC curve via the rank-sum statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    positives = np.asarray(positives, dtype=bool).reshape(-1)
    n_pos, n_neg = int(positives.sum()), int((~positives).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"AUC needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def label_auc(def_probs: torch.Tensor, means: torch.Tensor, ground_truth: GroundTruth, max_distance: float = None) -> float:
    """AUC of the deformation probabilities as a score for "deforming".

    Primitives are matched to the nearest surface point at frame 0 within twice the grid
    spacing; unmatched primitives are ignored.
    """
    max_distance = 2 * ground_truth.spacing if max_distance is None else max_distance
    tree = cKDTree(ground_truth.points(0).numpy())
    distance, nearest = tree.query(as_tensor(means).detach().numpy(), k=1)
    matched = distance <= max_distance
    if not matched.any():
        raise ValueError("No primitive lies near the ground-truth surface")
    deforming = ~ground_truth.rigid_labels[nearest[matched]]
    return roc_auc(as_tensor(def_probs).detach().numpy()[matched], deforming)
