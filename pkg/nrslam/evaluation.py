import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from loguru import logger  # noqa: E402

from nrslam.geometry import Pose, as_tensor  # noqa: E402
from nrslam.gaussians import FrameResiduals, load_snapshot  # noqa: E402
from nrslam.objectives.photometric import ssim as _ssim  # noqa: E402
from nrslam.priors import SequenceDataset  # noqa: E402
from nrslam.priors.files import read_trajectory  # noqa: E402
from nrslam.renderer import render_frame  # noqa: E402
from nrslam.simulator import label_auc, load_ground_truth  # noqa: E402
from nrslam.utils.exceptions import DatasetNotFound, LengthMismatch, ShapeMismatch  # noqa: E402
from nrslam.utils.logging import export_csv  # noqa: E402

ALIGNMENTS = ("rigid", "similarity")
PSNR_CAP = 99.0
MSE_FLOOR = 1e-10


@dataclass
class TrajectoryMetrics:
    rmse: float
    sd: float
    alignment: str
    errors: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.rmse < 0 or self.sd < 0:
            raise ValueError(f"ATE statistics must be non-negative, got rmse={self.rmse}, sd={self.sd}")
        if self.alignment not in ALIGNMENTS:
            raise ValueError(f"Unknown alignment {self.alignment!r}. Please choose from {ALIGNMENTS}")


@dataclass
class RunMetrics:
    frames: int
    alignment: str
    ate_rmse: float
    ate_sd: float
    psnr: float
    ssim: float
    label_auc: float


def align(model: np.ndarray, data: np.ndarray, scale: bool = False):
    """Closed-form least-squares (R, t, s) with ``s * R @ model + t ~ data``; points are rows."""
    mu_m, mu_d = model.mean(0), data.mean(0)
    zm, zd = model - mu_m, data - mu_d
    W = zd.T @ zm
    U, d, Vh = np.linalg.svd(W)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vh) < 0:
        S[2, 2] = -1
    R = U @ S @ Vh
    s = 1.0
    if scale:
        variance = (zm**2).sum()
        s = float(np.trace(np.diag(d) @ S) / variance) if variance > 0 else 1.0
    t = mu_d - s * R @ mu_m
    return R, t, s


def ate(estimated: Sequence[Pose], ground_truth: Sequence[Pose], mode: str = "rigid") -> TrajectoryMetrics:
    """Absolute trajectory error of camera positions after global alignment of ``estimated`` to ``ground_truth``."""
    if len(estimated) != len(ground_truth):
        raise LengthMismatch(f"{len(estimated)} estimated poses vs {len(ground_truth)} ground-truth poses")
    if len(estimated) < 2:
        raise LengthMismatch(f"ATE needs at least 2 poses, got {len(estimated)}")
    if mode not in ALIGNMENTS:
        raise ValueError(f"Unknown alignment {mode!r}. Please choose from {ALIGNMENTS}")
    est = np.stack([p.translation.detach().numpy() for p in estimated])
    gt = np.stack([p.translation.detach().numpy() for p in ground_truth])
    R, t, s = align(est, gt, scale=mode == "similarity")
    errors = np.linalg.norm((s * est @ R.T + t) - gt, axis=-1)
    return TrajectoryMetrics(rmse=float(np.sqrt(np.mean(errors**2))), sd=float(np.std(errors)), alignment=mode, errors=errors)


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"Images differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return 10 * math.log10(1.0 / mse)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"Images differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    return float(_ssim(a, b))


def load_residuals(run_dir: str, index: int, time: float) -> FrameResiduals:
    path = os.path.join(run_dir, "residuals", f"{index:06d}.pt")
    if not os.path.exists(path):
        return FrameResiduals.empty(time)
    return FrameResiduals.from_state_dict(torch.load(path))


def plot_errors(path: str, frames: List[int], errors: np.ndarray, rmse: float):
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(frames, errors, "-", color="tab:blue")
    ax.axhline(rmse, linestyle="--", color="tab:red", label=f"RMSE {rmse:.3f} mm")
    ax.set_xlabel("frame")
    ax.set_ylabel("position error [mm]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=90)
    plt.close(fig)


def plot_photometric(path: str, frames: List[int], psnrs: List[float], ssims: List[float]):
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    top.plot(frames, psnrs, "-", color="tab:green")
    top.set_ylabel("PSNR [dB]")
    bottom.plot(frames, ssims, "-", color="tab:purple")
    bottom.set_ylabel("SSIM")
    bottom.set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, dpi=90)
    plt.close(fig)


def evaluate_run(run_dir: str, dataset_dir: str, alignment: str = "rigid", rerender: bool = True, gate=None) -> RunMetrics:
    """Metrics of a finished run: ATE against ``gt_traj.txt``, PSNR and SSIM of re-rendered frames
    and, for simulated data, the AUC of the deformation probabilities against the rigidity labels.

    Writes ``metrics.csv``, ``ate_error.png`` and ``photometric.png`` into ``run_dir``.
    """
    trajectory_path = os.path.join(run_dir, "trajectory.txt")
    if not os.path.exists(trajectory_path):
        raise DatasetNotFound(f"Run {run_dir!r} has no trajectory.txt")
    dataset = SequenceDataset(dataset_dir)
    timestamps, poses = read_trajectory(trajectory_path)
    by_time = {round(ts, 6): i for i, ts in enumerate(dataset.timestamps)}
    frames = [by_time[round(ts, 6)] for ts in timestamps if round(ts, 6) in by_time]
    if len(frames) != len(poses):
        raise LengthMismatch(f"{len(poses) - len(frames)} trajectory timestamps are not in the dataset")

    rmse = sd = float("nan")
    if dataset.gt_poses is not None and len(poses) >= 2:
        metrics = ate(poses, [dataset.gt_poses[i] for i in frames], alignment)
        rmse, sd = metrics.rmse, metrics.sd
        plot_errors(os.path.join(run_dir, "ate_error.png"), frames, metrics.errors, rmse)
        logger.info(f"ATE ({alignment}) RMSE {rmse:.4f} mm, SD {sd:.4f} mm over {len(frames)} frames")
    else:
        logger.warning(f"No ground-truth trajectory for {dataset_dir!r}; skipping ATE")

    mean_psnr = mean_ssim = auc = float("nan")
    snapshot = os.path.join(run_dir, "map", "final.txt")
    if os.path.exists(snapshot):
        gmap = load_snapshot(snapshot)
        if rerender:
            psnrs, ssims = [], []
            for index, pose in zip(frames, poses):
                frame = dataset.frame(index)
                residuals = load_residuals(run_dir, index, frame.time)
                with torch.no_grad():
                    out = render_frame(gmap, frame.time, frame.intrinsics, pose, residuals, channels={"rgb"}, gate=gate)
                psnrs.append(psnr(out.rgb.clamp(0, 1), frame.image))
                ssims.append(ssim(out.rgb.clamp(0, 1), frame.image))
            mean_psnr, mean_ssim = float(np.mean(psnrs)), float(np.mean(ssims))
            plot_photometric(os.path.join(run_dir, "photometric.png"), frames, psnrs, ssims)
            logger.info(f"PSNR {mean_psnr:.3f} dB, SSIM {mean_ssim:.4f}")
        ground_truth = load_ground_truth(dataset_dir)
        if ground_truth is not None and len(gmap) and 0 < ground_truth.rigid_labels.sum() < len(ground_truth.rigid_labels):
            try:
                auc = label_auc(gmap.def_probs, gmap.means, ground_truth)
                logger.info(f"Deformation probability AUC {auc:.4f}")
            except ValueError as e:
                logger.warning(f"No label AUC: {e}")
    else:
        logger.warning(f"No final map snapshot in {run_dir!r}; skipping rendering metrics")

    result = RunMetrics(len(frames), alignment, rmse, sd, mean_psnr, mean_ssim, auc)
    path = os.path.join(run_dir, "metrics.csv")
    if os.path.exists(path):
        os.remove(path)
    export_csv(path, [result])
    return result
