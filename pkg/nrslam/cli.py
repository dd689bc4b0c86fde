"""``nrslam`` command line: simulate, run, eval and render subcommands.

Every subcommand takes the dotted options of ``nrslam.utils.config`` plus ``--config <file>``
and ``--seed <n>``.
"""

import os
import sys
from typing import List, Optional

import torch
from loguru import logger

from nrslam.evaluation import evaluate_run, load_residuals
from nrslam.gaussians import load_snapshot
from nrslam.mapping import DEFORMABLE_GATE
from nrslam.priors import SequenceDataset
from nrslam.priors.files import read_trajectory
from nrslam.renderer import render_frame
from nrslam.simulator import SceneSpec, generate
from nrslam.slam import DUMPABLE_CHANNELS, SlamSystem, write_channels
from nrslam.utils.config import (
    add_args,
    add_eval_args,
    add_render_args,
    add_simulate_args,
    check_config,
    config,
    load_run_config,
)
from nrslam.utils.exceptions import DatasetNotFound, NRSlamError

SUBCOMMANDS = ("simulate", "run", "eval", "render")


def simulate(argv: List[str]):
    cfg = config(argv, add_simulate_args)
    check_config(cfg, cfg.out)
    spec = SceneSpec.from_file(cfg.spec, seed=cfg.seed) if cfg.spec else SceneSpec(seed=cfg.seed)
    generate(spec, cfg.out)


def run(argv: List[str]):
    cfg = config(argv, add_args)
    if not cfg.dataset.path:
        raise DatasetNotFound("--dataset.path is required")
    check_config(cfg)
    SlamSystem(cfg).run()


def evaluate(argv: List[str]):
    cfg = config(argv, add_eval_args)
    check_config(cfg, cfg.run)
    run_config = load_run_config(cfg.run)
    dataset = cfg.dataset.path or run_config.dataset.path
    gate = None if run_config.mapping.gating else DEFORMABLE_GATE
    metrics = evaluate_run(cfg.run, dataset, cfg.eval.alignment, cfg.eval.render, gate)
    logger.success(f"📊 {metrics}")


def render(argv: List[str]):
    cfg = config(argv, add_render_args)
    out_dir = cfg.out or os.path.join(cfg.run, "render")
    check_config(cfg, out_dir)
    run_config = load_run_config(cfg.run)
    dataset = SequenceDataset(run_config.dataset.path)
    timestamps, poses = read_trajectory(os.path.join(cfg.run, "trajectory.txt"))
    pose_of = {round(ts, 6): pose for ts, pose in zip(timestamps, poses)}
    timestamp = round(dataset.timestamps[cfg.frame], 6)
    if timestamp not in pose_of:
        raise DatasetNotFound(f"Frame {cfg.frame} is not part of run {cfg.run!r}")
    gmap = load_snapshot(os.path.join(cfg.run, "map", "final.txt"))
    time = dataset.time(cfg.frame)
    channels = [c for c in cfg.output.dump_channels if c in DUMPABLE_CHANNELS]
    with torch.no_grad():
        out = render_frame(
            gmap,
            time,
            dataset.intrinsics,
            pose_of[timestamp],
            load_residuals(cfg.run, cfg.frame, time),
            channels=set(channels),
            gate=None if run_config.mapping.gating else DEFORMABLE_GATE,
        )
    write_channels(out, channels, out_dir, cfg.frame)
    logger.success(f"🖼️ Rendered frame {cfg.frame} ({', '.join(channels)}) into {out_dir}")


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in SUBCOMMANDS:
        print(f"usage: nrslam {{{','.join(SUBCOMMANDS)}}} [options]", file=sys.stderr)
        return 2
    command, rest = argv[0], argv[1:]
    handlers = {"simulate": simulate, "run": run, "eval": evaluate, "render": render}
    try:
        handlers[command](rest)
    except NRSlamError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
