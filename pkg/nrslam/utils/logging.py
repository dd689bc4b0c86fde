import csv
import os
import copy
from dataclasses import asdict, dataclass, fields
from typing import List

import wandb
from loguru import logger

import nrslam


@dataclass
class FrameLog:
    frame: int
    timestamp: float
    tx: float
    ty: float
    tz: float
    qx: float
    qy: float
    qz: float
    qw: float
    inlier_ratio: float
    pnp_status: str
    refine_loss_start: float
    refine_loss_end: float
    deform_loss_start: float
    deform_loss_end: float
    num_residuals: int
    keyframe_reason: str
    num_primitives: int
    active_bases: int
    duration: float


@dataclass
class ManagementLog:
    keyframe: int
    attribute: str
    inserted_coverage: int
    inserted_error: int
    merged: int
    pruned: int
    frozen: int
    active: int


@dataclass
class BATraceLog:
    keyframe: int
    iteration: int
    total: float
    photometric: float
    geometric: float
    bce: float
    temporal: float
    spatial: float


def export_csv(path: str, rows: List) -> str:
    """Appends dataclass rows to a CSV file, writing the header when the file is new."""
    if not rows:
        return path
    new_file = not os.path.exists(path)
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=[field.name for field in fields(rows[0])])
        if new_file:
            writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))
    return path


def init_wandb(self, reinit=False):
    """Starts a new wandb run."""
    tags = [nrslam.__version__, self.config.dataset.provider]
    if not self.config.geometric.enabled:
        tags.append("no_geometric")
    if not self.config.tracking.deformation_weighting:
        tags.append("no_deformation_weighting")
    if not self.config.management.enabled:
        tags.append("no_management")

    wandb_config = {
        key: copy.deepcopy(self.config.get(key).to_dict())
        for key in ("tracking", "keyframe", "mapping", "management", "geometric", "masks")
    }
    wandb_config["seed"] = self.config.seed

    self.wandb = wandb.init(
        anonymous="allow",
        reinit=reinit,
        project=self.config.wandb.project_name,
        entity=self.config.wandb.entity,
        config=wandb_config,
        mode="offline" if self.config.wandb.offline else "online",
        dir=self.config.full_path,
        tags=tags,
        notes=self.config.wandb.notes,
    )
    logger.success(f"Started a new wandb run <blue> {self.wandb.name} </blue>")


def log_event(self, event: dict):
    if not self.config.logging.dont_save_events:
        logger.log("EVENTS", "events", **event)

    if not self.config.wandb.on:
        return

    if not getattr(self, "wandb", None):
        init_wandb(self)

    # Log the event to wandb.
    self.wandb.log(event)
