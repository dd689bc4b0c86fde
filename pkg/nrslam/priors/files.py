"""On-disk dataset layout: reading frames, intrinsics, trajectories and prior files.

::

    rgb/%06d.png        8-bit RGB frames
    intrinsics.txt      fx fy cx cy width height
    gt_traj.txt         optional, timestamp tx ty tz qx qy qz qw per frame
    depth/%06d.png      16-bit depth priors, 0.1 mm per unit, 0 = invalid
    tracks/%06d.csv     id,t0,u0x,u0y,ux,uy,x0,y0,z0,x,y,z
"""

import glob
import os
from typing import List, Optional

import cv2
import numpy as np
import torch

from nrslam.geometry import DTYPE, Intrinsics, Pose, as_tensor
from nrslam.priors.base import FrameBundle, Priors, PriorProvider, Tracks
from nrslam.utils.exceptions import DatasetNotFound, MissingPriorFile, ShapeMismatch

DEPTH_UNIT_MM = 0.1
TRACK_COLUMNS = ("id", "t0", "u0x", "u0y", "ux", "uy", "x0", "y0", "z0", "x", "y", "z")


def read_image(path: str) -> torch.Tensor:
    bgr = cv2.imread(path, cv2.IMREAD_COLOR)
    if bgr is None:
        raise DatasetNotFound(f"Could not read image {path!r}")
    return torch.from_numpy(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0)


def write_image(path: str, rgb: torch.Tensor):
    values = np.clip(np.rint(rgb.detach().numpy() * 255.0), 0, 255).astype(np.uint8)
    cv2.imwrite(path, cv2.cvtColor(values, cv2.COLOR_RGB2BGR))


def read_depth(path: str) -> torch.Tensor:
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise MissingPriorFile(f"Depth prior {path!r} not found")
    if raw.dtype != np.uint16 or raw.ndim != 2:
        raise ShapeMismatch(f"Depth prior {path!r} must be a single-channel 16-bit image")
    return torch.from_numpy(raw.astype(np.float64) * DEPTH_UNIT_MM)


def write_depth(path: str, depth_mm: torch.Tensor):
    units = np.clip(np.rint(depth_mm.detach().numpy() / DEPTH_UNIT_MM), 0, 65535).astype(np.uint16)
    cv2.imwrite(path, units)


def read_tracks(path: str) -> Tracks:
    if not os.path.exists(path):
        raise MissingPriorFile(f"Track prior {path!r} not found")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    if data.size == 0:
        return Tracks.empty()
    if data.shape[1] != len(TRACK_COLUMNS):
        raise ShapeMismatch(f"Track file {path!r} has {data.shape[1]} columns, expected {len(TRACK_COLUMNS)}")
    data = torch.from_numpy(data)
    return Tracks(
        ids=data[:, 0].long(),
        start_frame=data[:, 1].long(),
        u0=data[:, 2:4].clone(),
        u=data[:, 4:6].clone(),
        x0=data[:, 6:9].clone(),
        x=data[:, 9:12].clone(),
    )


def write_tracks(path: str, tracks: Tracks):
    data = torch.cat(
        [
            tracks.ids.to(DTYPE).unsqueeze(-1),
            tracks.start_frame.to(DTYPE).unsqueeze(-1),
            tracks.u0,
            tracks.u,
            tracks.x0,
            tracks.x,
        ],
        dim=-1,
    ).detach().numpy()
    fmt = ["%d", "%d"] + ["%.17g"] * 10
    np.savetxt(path, data.reshape(-1, len(TRACK_COLUMNS)), delimiter=",", fmt=fmt, header=",".join(TRACK_COLUMNS), comments="")


def read_trajectory(path: str):
    """Returns (timestamps, poses) from a TUM-style trajectory file."""
    timestamps, poses = [], []
    with open(path, "r") as f:
        for line in f:
            fields = line.split()
            if not fields or fields[0].startswith("#"):
                continue
            timestamp, pose = Pose.from_tum(fields)
            timestamps.append(timestamp)
            poses.append(pose)
    return timestamps, poses


def write_trajectory(path: str, timestamps: List[float], poses: List[Pose]):
    with open(path, "w") as f:
        for timestamp, pose in zip(timestamps, poses):
            f.write(pose.to_tum(timestamp) + "\n")


class SequenceDataset:
    """Random access to the frames of a dataset directory."""

    def __init__(self, root: str):
        if not os.path.isdir(root):
            raise DatasetNotFound(f"Dataset directory {root!r} not found")
        self.root = root
        self.image_paths = sorted(glob.glob(os.path.join(root, "rgb", "*.png")))
        if not self.image_paths:
            raise DatasetNotFound(f"No frames under {os.path.join(root, 'rgb')!r}")
        intrinsics_path = os.path.join(root, "intrinsics.txt")
        if not os.path.exists(intrinsics_path):
            raise DatasetNotFound(f"Missing {intrinsics_path!r}")
        self.intrinsics = Intrinsics.from_file(intrinsics_path)

        self.gt_poses: Optional[List[Pose]] = None
        self.timestamps = [float(i) for i in range(len(self))]
        gt_path = os.path.join(root, "gt_traj.txt")
        if os.path.exists(gt_path):
            timestamps, poses = read_trajectory(gt_path)
            if len(poses) == len(self):
                self.timestamps, self.gt_poses = timestamps, poses

    def __len__(self):
        return len(self.image_paths)

    def __repr__(self):
        return f"SequenceDataset(root={self.root!r}, frames={len(self)}, intrinsics={self.intrinsics})"

    def time(self, index: int) -> float:
        return index / max(len(self) - 1, 1)

    def frame(self, index: int) -> FrameBundle:
        image = read_image(self.image_paths[index])
        if tuple(image.shape[:2]) != self.intrinsics.shape:
            raise ShapeMismatch(f"Frame {index} is {tuple(image.shape[:2])}, intrinsics say {self.intrinsics.shape}")
        return FrameBundle(
            index=index,
            time=self.time(index),
            timestamp=self.timestamps[index],
            image=image,
            intrinsics=self.intrinsics,
        )


class FilePriorProvider(PriorProvider):
    """Priors precomputed on disk next to the frames.

    Track anchors are whatever the files hold (every ``track_reseed`` frames for simulated data),
    not the keyframe anchor the tracker asks for.
    """

    def __init__(self, root: str, **kwargs):
        self.root = root

    name = "files"

    def fetch(self, frame: FrameBundle, anchor: int) -> Priors:
        depth = read_depth(os.path.join(self.root, "depth", f"{frame.index:06d}.png"))
        tracks = read_tracks(os.path.join(self.root, "tracks", f"{frame.index:06d}.csv"))
        return Priors(depth=as_tensor(depth), tracks=tracks)
