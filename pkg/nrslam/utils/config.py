# The MIT License (MIT)
# Copyright © 2026 nrslam developers

# Permission is hereby granted, free of charge, to any person obtaining a copy of this software and associated
# documentation files (the “Software”), to deal in the Software without restriction, including without limitation
# the rights to use, copy, modify, merge, publish, distribute, sublicense, and/or sell copies of the Software,
# and to permit persons to whom the Software is furnished to do so, subject to the following conditions:

# The above copyright notice and this permission notice shall be included in all copies or substantial portions of
# the Software.

# THE SOFTWARE IS PROVIDED “AS IS”, WITHOUT WARRANTY OF ANY KIND, EXPRESS OR IMPLIED, INCLUDING BUT NOT LIMITED TO
# THE WARRANTIES OF MERCHANTABILITY, FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL
# THE AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER LIABILITY, WHETHER IN AN ACTION
# OF CONTRACT, TORT OR OTHERWISE, ARISING FROM, OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER
# DEALINGS IN THE SOFTWARE.


import os
import sys
import argparse
from types import SimpleNamespace
from typing import Dict, List, Optional

from loguru import logger

from nrslam.utils.exceptions import ConfigError


class Config(SimpleNamespace):
    """Nested run configuration: ``config.tracking.refine_iters``."""

    def get(self, key: str, default=None):
        node = self
        for part in key.split("."):
            if not hasattr(node, part):
                return default
            node = getattr(node, part)
        return node

    def to_dict(self) -> dict:
        return {k: v.to_dict() if isinstance(v, Config) else v for k, v in vars(self).items()}


def str2bool(value) -> bool:
    if isinstance(value, bool):
        return value
    lowered = str(value).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"Expected a boolean, got {value!r}")


def _flag(parser, name: str, default: bool, help: str):
    parser.add_argument(name, type=str2bool, nargs="?", const=True, default=default, help=help)


def add_common_args(parser):
    parser.add_argument("--config", type=str, default=None, help="Flat `key = value` configuration file.")
    parser.add_argument("--seed", type=int, default=0, help="Seed for every random choice of the run.")
    parser.add_argument("--logging.level", type=str, default="INFO", help="Console log level.")
    _flag(parser, "--logging.dont_save_events", False, "If set, we dont save events to a log file.")
    parser.add_argument("--logging.events_retention_size", type=str, default="2 GB", help="Events retention size.")
    _flag(parser, "--wandb.on", False, "Enable wandb logging.")
    _flag(parser, "--wandb.offline", False, "Runs wandb in offline mode.")
    parser.add_argument("--wandb.project_name", type=str, default="nrslam", help="Wandb project to log to.")
    parser.add_argument("--wandb.entity", type=str, default=None, help="Wandb entity to log to.")
    parser.add_argument("--wandb.notes", type=str, default="", help="Notes to add to the wandb run.")


def add_args(parser):
    """Adds every run option to the parser."""
    add_common_args(parser)

    parser.add_argument("--dataset.path", type=str, default=None, help="Dataset directory (rgb/, intrinsics.txt, priors).")
    parser.add_argument("--dataset.provider", type=str, default="files", help="Prior provider: files or oracle.")
    parser.add_argument("--dataset.start", type=int, default=0, help="First frame to process.")
    parser.add_argument("--dataset.end", type=int, default=-1, help="One past the last frame to process, -1 for all.")

    parser.add_argument("--output.dir", type=str, default="runs/latest", help="Directory for run artifacts.")
    parser.add_argument(
        "--output.dump_channels", "--dump-channels", type=str, nargs="*", default=[], help="Render channels to dump per frame (rgb, depth, confidence, transmittance)."
    )
    parser.add_argument("--output.snapshot_every", type=int, default=0, help="Write a map snapshot every N keyframes, 0 for the final map only.")

    parser.add_argument("--priors.grid_size", type=int, default=6, help="Pixel spacing of the track query grid.")
    parser.add_argument("--priors.buffer_size", type=int, default=3, help="Keyframes between track re-seeds.")
    parser.add_argument("--priors.depth_noise", type=float, default=0.0, help="Multiplicative depth noise of the oracle provider.")
    parser.add_argument("--priors.track_noise_px", type=float, default=0.0, help="Additive 2D track noise of the oracle provider.")
    parser.add_argument("--priors.track_noise_mm", type=float, default=0.0, help="Additive 3D track noise of the oracle provider.")

    parser.add_argument("--masks.delta", type=float, default=0.2, help="Gray-level margin of the validity mask.")
    parser.add_argument("--masks.tau_T", type=float, default=0.1, help="Transmittance threshold of the map mask.")
    _flag(parser, "--masks.use_validity", True, "Use the validity mask.")
    _flag(parser, "--masks.use_covis", True, "Use the co-visibility mask.")

    _flag(parser, "--geometric.enabled", True, "Use the geometric loss.")
    _flag(parser, "--geometric.robust", True, "IRLS reweighting of the geometric residuals.")
    parser.add_argument("--geometric.weight", type=float, default=1.0, help="Weight of the geometric loss next to the photometric one.")
    parser.add_argument("--geometric.lambda0", type=float, default=1.0, help="Initial annealing weight.")
    parser.add_argument("--geometric.lambda_min", type=float, default=0.01, help="Final annealing weight.")
    parser.add_argument("--geometric.tau", type=float, default=10.0, help="Annealing time constant in iterations.")
    parser.add_argument("--geometric.huber_threshold", type=float, default=0.0, help="Fixed Huber threshold, 0 for 1.345 x median residual.")
    parser.add_argument("--geometric.depth_weight", type=float, default=1.0, help="Weight of the depth term.")
    parser.add_argument("--geometric.traj2d_weight", type=float, default=1.0, help="Weight of the 2D trajectory term.")
    parser.add_argument("--geometric.traj3d_weight", type=float, default=1.0, help="Weight of the 3D trajectory term.")

    parser.add_argument("--tracking.tau_def", type=float, default=0.5, help="Confidence above which tracks are dropped from PnP.")
    parser.add_argument("--tracking.pnp_threshold", type=float, default=2.0, help="RANSAC inlier threshold in pixels.")
    parser.add_argument("--tracking.pnp_iters", type=int, default=500, help="Maximum RANSAC iterations.")
    parser.add_argument("--tracking.pnp_confidence", type=float, default=0.99, help="RANSAC success probability.")
    parser.add_argument("--tracking.refine_iters", type=int, default=40, help="Pose refinement iterations.")
    parser.add_argument("--tracking.lr_rotation", type=float, default=4e-4, help="Refinement learning rate of the rotation.")
    parser.add_argument("--tracking.lr_translation", type=float, default=1e-3, help="Refinement learning rate of the translation (scene units).")
    parser.add_argument("--tracking.eps_def", type=float, default=0.5, help="Deformation probability above which residuals are estimated.")
    parser.add_argument("--tracking.deform_iters", type=int, default=40, help="Per-frame deformation iterations.")
    parser.add_argument("--tracking.lr_residual", type=float, default=5e-4, help="Per-frame residual learning rate.")
    parser.add_argument("--tracking.lambda_reg", type=float, default=0.01, help="Residual magnitude weight.")
    parser.add_argument("--tracking.lambda_tem", type=float, default=0.01, help="Residual temporal smoothness weight.")
    _flag(parser, "--tracking.use_pnp", True, "Run the weighted PnP stage.")
    _flag(parser, "--tracking.use_refine", True, "Run the photometric and geometric refinement stage.")
    _flag(parser, "--tracking.deformation_weighting", True, "Weight tracking residuals by one minus the deformation confidence.")
    _flag(parser, "--tracking.full_update", False, "Update the basis weights of every primitive per frame.")

    parser.add_argument("--keyframe.covis_ratio", type=float, default=0.75, help="Co-visible pixel ratio below which a keyframe is taken.")
    parser.add_argument("--keyframe.rdef", type=float, default=0.1, help="Relative residual ratio above which a keyframe is taken.")
    parser.add_argument("--keyframe.rdef_eps", type=float, default=0.05, help="Stabilizer of the relative residual ratio.")
    parser.add_argument("--keyframe.translation", type=float, default=8.0, help="Translation to the last keyframe (mm) that triggers a keyframe.")
    parser.add_argument("--keyframe.interval", type=int, default=20, help="Frames since the last keyframe that trigger a keyframe.")

    parser.add_argument("--mapping.window", type=int, default=7, help="Keyframe window size.")
    parser.add_argument("--mapping.pose_iters", type=int, default=20, help="Window pose optimization iterations.")
    parser.add_argument("--mapping.lr_rotation", type=float, default=2e-4, help="Keyframe rotation learning rate.")
    parser.add_argument("--mapping.lr_translation", type=float, default=5e-4, help="Keyframe translation learning rate (scene units).")
    parser.add_argument("--mapping.ba_iters", type=int, default=60, help="Bundle adjustment iterations per keyframe.")
    parser.add_argument("--mapping.responsibility_every", type=int, default=10, help="Iterations between responsibility estimates.")
    parser.add_argument("--mapping.management_at", type=int, default=30, help="Iteration at which the deformation field is managed.")
    parser.add_argument("--mapping.lambda_w", type=float, default=1.0, help="Weight of the probability supervision.")
    parser.add_argument("--mapping.lambda_temp", type=float, default=0.01, help="Weight of the temporal probability smoothness.")
    parser.add_argument("--mapping.lambda_spatial", type=float, default=0.01, help="Weight of the spatial probability smoothness.")
    parser.add_argument("--mapping.lr_means", type=float, default=1.6e-4, help="Learning rate of the means (scene units).")
    parser.add_argument("--mapping.lr_scales", type=float, default=1.6e-4, help="Learning rate of the log-scales.")
    parser.add_argument("--mapping.lr_rotations", type=float, default=1.6e-4, help="Learning rate of the rotations.")
    parser.add_argument("--mapping.lr_weights", type=float, default=1.6e-4, help="Learning rate of the basis weights.")
    parser.add_argument("--mapping.lr_basis_time", type=float, default=1.6e-4, help="Learning rate of the basis centers and extents.")
    parser.add_argument("--mapping.lr_opacity", type=float, default=0.05, help="Learning rate of the opacity logits.")
    parser.add_argument("--mapping.lr_color", type=float, default=0.0025, help="Learning rate of the colors.")
    parser.add_argument("--mapping.lr_logits", type=float, default=0.05, help="Learning rate of the deformation logits.")
    parser.add_argument("--mapping.new_prob", type=float, default=0.6, help="Deformation probability of new primitives.")
    parser.add_argument("--mapping.extension_stride", type=int, default=4, help="Pixel stride when sampling new primitives.")
    parser.add_argument("--mapping.extension_tau", type=float, default=0.1, help="Transmittance at or above which a pixel is free space.")
    parser.add_argument("--mapping.beta", type=float, default=200.0, help="Inverse temperature of the responsibility.")
    parser.add_argument("--mapping.eta", type=float, default=40.0, help="Temporal decay of keyframe evidence.")
    parser.add_argument("--mapping.eps", type=float, default=1e-6, help="Stabilizer of the evidence average.")
    parser.add_argument("--mapping.prior_deform", type=float, default=0.5, help="Prior probability of the deformable mode.")
    parser.add_argument("--mapping.neighbors", type=int, default=8, help="Neighbours per primitive for spatial smoothness.")
    _flag(parser, "--mapping.optimize_poses", True, "Optimize window poses before extension.")
    _flag(parser, "--mapping.estimate_probability", True, "Supervise deformation probabilities with responsibilities.")
    _flag(parser, "--mapping.gating", True, "Gate deformation by the deformation probability (off forces gate 1).")

    _flag(parser, "--management.enabled", True, "Run dynamic deformation field management.")
    parser.add_argument("--management.delta_cov", type=float, default=0.5, help="Coverage below which a basis is inserted.")
    parser.add_argument("--management.tau_rgb", type=float, default=0.05, help="RGB error marking a bad pixel.")
    parser.add_argument("--management.tau_prob", type=float, default=0.5, help="Probability above which a primitive counts as deformable.")
    parser.add_argument("--management.tau_err", type=float, default=1.0, help="Error score that triggers a narrow basis.")
    parser.add_argument("--management.eta_mu", type=float, default=0.5, help="Center similarity for merging, in extents.")
    parser.add_argument("--management.eta_sigma", type=float, default=0.1, help="Relative extent similarity for merging.")
    parser.add_argument("--management.delta_act", type=float, default=0.05, help="Relative activation below which a basis is pruned or frozen.")
    parser.add_argument("--management.sigma_new_factor", type=float, default=0.7, help="Extent of error-driven bases relative to the mean extent.")
    parser.add_argument("--management.activation_floor", type=float, default=1e-6, help="Total activation below which every basis is inactive.")

    parser.add_argument("--init.frames", type=int, default=7, help="Frames in the initial window.")
    parser.add_argument("--init.stride", type=int, default=2, help="Pixel stride when seeding the first map.")
    parser.add_argument("--init.fit_iters", type=int, default=150, help="First-frame fit iterations.")
    parser.add_argument("--init.pose_iters", type=int, default=60, help="Pose-only iterations per initial frame.")
    parser.add_argument("--init.ssim_lambda", type=float, default=0.2, help="L1 share of the first-frame photometric loss.")
    parser.add_argument("--init.depth_weight", type=float, default=0.1, help="Weight of the L1 depth loss of the first-frame fit.")
    parser.add_argument("--init.num_bases", type=int, default=5, help="Bases per attribute and primitive.")
    parser.add_argument("--init.extent_factor", type=float, default=0.7, help="Basis extent relative to the center spacing.")
    parser.add_argument("--init.opacity", type=float, default=0.9, help="Initial opacity of seeded primitives.")

    parser.add_argument("--scene.scale_mm", type=float, default=50.0, help="Multiplier of position-like learning rates.")


def add_simulate_args(parser):
    add_common_args(parser)
    parser.add_argument("--spec", type=str, default=None, help="Scene spec file.")
    parser.add_argument("--out", type=str, required=True, help="Dataset directory to write.")


def add_eval_args(parser):
    add_common_args(parser)
    parser.add_argument("--run", type=str, required=True, help="Run directory.")
    parser.add_argument("--dataset.path", type=str, default=None, help="Dataset directory, read from the run if omitted.")
    parser.add_argument("--eval.alignment", type=str, default="rigid", help="ATE alignment: rigid or similarity.")
    _flag(parser, "--eval.render", True, "Re-render frames for PSNR and SSIM.")


def add_render_args(parser):
    add_common_args(parser)
    parser.add_argument("--run", type=str, required=True, help="Run directory.")
    parser.add_argument("--frame", type=int, required=True, help="Frame to re-render.")
    parser.add_argument("--out", type=str, default=None, help="Output directory, defaults to <run>/render.")
    parser.add_argument("--output.dump_channels", "--dump-channels", type=str, nargs="*", default=["rgb", "depth"], help="Channels to write.")


# Inclusive bounds; None leaves a side open. Keys in _POSITIVE must also be > 0.
_RANGES = {
    "priors.grid_size": (1, None),
    "priors.buffer_size": (1, None),
    "priors.depth_noise": (0, None),
    "priors.track_noise_px": (0, None),
    "priors.track_noise_mm": (0, None),
    "masks.delta": (0, 0.5),
    "masks.tau_T": (0, 1),
    "geometric.weight": (0, None),
    "geometric.lambda0": (0, None),
    "geometric.lambda_min": (0, None),
    "geometric.huber_threshold": (0, None),
    "tracking.tau_def": (0, 1),
    "tracking.pnp_threshold": (0, None),
    "tracking.pnp_iters": (1, None),
    "tracking.pnp_confidence": (0, 1),
    "tracking.refine_iters": (0, None),
    "tracking.eps_def": (0, 1),
    "tracking.deform_iters": (0, None),
    "tracking.lambda_reg": (0, None),
    "tracking.lambda_tem": (0, None),
    "keyframe.covis_ratio": (0, 1),
    "keyframe.rdef": (0, None),
    "keyframe.translation": (0, None),
    "keyframe.interval": (1, None),
    "mapping.window": (2, None),
    "mapping.pose_iters": (0, None),
    "mapping.ba_iters": (0, None),
    "mapping.responsibility_every": (1, None),
    "mapping.management_at": (0, None),
    "mapping.lambda_w": (0, None),
    "mapping.lambda_temp": (0, None),
    "mapping.lambda_spatial": (0, None),
    "mapping.new_prob": (0, 1),
    "mapping.extension_stride": (1, None),
    "mapping.extension_tau": (0, 1),
    "mapping.eta": (0, None),
    "mapping.prior_deform": (0, 1),
    "mapping.neighbors": (1, None),
    "management.delta_cov": (0, None),
    "management.tau_rgb": (0, None),
    "management.tau_prob": (0, 1),
    "management.tau_err": (0, None),
    "management.eta_mu": (0, None),
    "management.eta_sigma": (0, None),
    "management.delta_act": (0, 1),
    "management.sigma_new_factor": (0, None),
    "management.activation_floor": (0, None),
    "init.frames": (2, None),
    "init.stride": (1, None),
    "init.fit_iters": (0, None),
    "init.pose_iters": (0, None),
    "init.ssim_lambda": (0, 1),
    "init.depth_weight": (0, None),
    "init.num_bases": (1, None),
    "init.opacity": (0, 1),
}
_POSITIVE = {
    "geometric.tau",
    "tracking.lr_rotation",
    "tracking.lr_translation",
    "tracking.lr_residual",
    "keyframe.rdef_eps",
    "mapping.lr_rotation",
    "mapping.lr_translation",
    "mapping.lr_means",
    "mapping.lr_scales",
    "mapping.lr_rotations",
    "mapping.lr_weights",
    "mapping.lr_basis_time",
    "mapping.lr_opacity",
    "mapping.lr_color",
    "mapping.lr_logits",
    "mapping.beta",
    "mapping.eps",
    "mapping.prior_deform",
    "mapping.new_prob",
    "init.extent_factor",
    "init.opacity",
    "scene.scale_mm",
}
_CHOICES = {
    "dataset.provider": ("files", "oracle"),
    "eval.alignment": ("rigid", "similarity"),
}


def _parser_actions(parser) -> Dict[str, argparse.Action]:
    return {action.dest: action for action in parser._actions if action.option_strings}


def _convert(action: argparse.Action, raw: str):
    convert = action.type or str
    if action.nargs in ("*", "+"):
        return [convert(v) for v in raw.replace(",", " ").split()]
    return convert(raw)


def load_config_file(path: str, parser) -> dict:
    """Reads a flat ``key = value`` file; values are typed by the matching option of ``parser``."""
    if not os.path.exists(path):
        raise ConfigError(f"Config file {path!r} not found")
    actions = _parser_actions(parser)
    values = {}
    with open(path, "r") as f:
        for number, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"Line {number} of {path!r} is not `key = value`: {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in actions or key == "config":
                raise ConfigError(f"Unknown config key {key!r} on line {number} of {path!r}")
            try:
                values[key] = _convert(actions[key], raw)
            except (ValueError, argparse.ArgumentTypeError) as e:
                raise ConfigError(f"Bad value for {key!r} on line {number} of {path!r}: {e}")
    return values


def nest(flat: dict) -> Config:
    root = Config()
    for key, value in flat.items():
        node = root
        *parents, leaf = key.split(".")
        for part in parents:
            if not hasattr(node, part):
                setattr(node, part, Config())
            node = getattr(node, part)
        setattr(node, leaf, value)
    return root


def config(argv: Optional[List[str]] = None, add=add_args) -> Config:
    """Defaults, then the ``--config`` file, then explicit command-line options."""
    parser = argparse.ArgumentParser()
    add(parser)
    known, _ = parser.parse_known_args(argv)
    if known.config:
        parser.set_defaults(**load_config_file(known.config, parser))
    return nest(vars(parser.parse_args(argv)))


def validate(config: Config):
    for key, (lo, hi) in _RANGES.items():
        value = config.get(key)
        if value is None:
            continue
        if (lo is not None and value < lo) or (hi is not None and value > hi):
            raise ConfigError(f"{key} = {value} is outside [{lo}, {hi if hi is not None else 'inf'}]")
    for key in _POSITIVE:
        value = config.get(key)
        if value is not None and value <= 0:
            raise ConfigError(f"{key} = {value} must be positive")
    for key, choices in _CHOICES.items():
        value = config.get(key)
        if value is not None and value not in choices:
            raise ConfigError(f"{key} = {value!r} not supported. Please choose from {choices}")
    if config.get("masks.delta") is not None and config.masks.delta >= 0.5:
        raise ConfigError(f"masks.delta = {config.masks.delta} must be below 0.5")


def check_config(config: Config, full_path: Optional[str] = None):
    r"""Checks/validates the config namespace object and sets up logging."""
    validate(config)

    full_path = os.path.expanduser(full_path or config.get("output.dir") or ".")
    logger.info(f"Logging path: {full_path}")
    config.full_path = full_path
    if not os.path.exists(full_path):
        os.makedirs(full_path, exist_ok=True)

    logger.remove()
    logger.add(sys.stderr, level=config.logging.level)

    log_level_exists = "EVENTS" in logger._core.levels
    if not log_level_exists:
        logger.level("EVENTS", no=38, icon="📝")
    if not config.logging.dont_save_events:
        # Add custom event logger for the events.
        logger.add(
            os.path.join(full_path, "events.log"),
            rotation=config.logging.events_retention_size,
            serialize=True,
            enqueue=True,
            backtrace=False,
            diagnose=False,
            level="EVENTS",
            filter=lambda record: record["level"].name == "EVENTS",
            format="{time:YYYY-MM-DD at HH:mm:ss} | {level} | {message}",
        )


def _flatten(node: Config, prefix: str = "") -> Dict[str, object]:
    flat = {}
    for key, value in vars(node).items():
        name = f"{prefix}{key}"
        if isinstance(value, Config):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def save_config(config: Config, path: str, add=add_args):
    """Writes every option known to ``add`` as a flat ``key = value`` file that ``--config`` accepts."""
    parser = argparse.ArgumentParser()
    add(parser)
    actions = _parser_actions(parser)
    with open(path, "w") as f:
        for key, value in sorted(_flatten(config).items()):
            if key not in actions or key == "config" or value is None:
                continue
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            f.write(f"{key} = {value}\n")


def load_run_config(run_dir: str) -> Config:
    """Configuration a run was made with, from ``<run_dir>/config.txt``."""
    parser = argparse.ArgumentParser()
    add_args(parser)
    parser.set_defaults(**load_config_file(os.path.join(run_dir, "config.txt"), parser))
    return nest(vars(parser.parse_args([])))
