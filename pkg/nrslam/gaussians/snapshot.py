"""Plain-text map snapshots. The layout is documented in docs/map_snapshot.md."""

from typing import List

import torch

from nrslam.geometry import as_tensor
from nrslam.gaussians.basis import ATTRIBUTE_DIMS, ATTRIBUTES
from nrslam.gaussians.map import CanonicalMap
from nrslam.utils.exceptions import ShapeMismatch

MAGIC = "NRSLAM-MAP"
VERSION = 2


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_snapshot(gmap: CanonicalMap, path: str):
    lines: List[str] = [f"{MAGIC} {VERSION}", f"primitives {len(gmap)}"]
    lines.append("bases " + " ".join(f"{attr} {len(gmap.bases[attr])}" for attr in ATTRIBUTES))
    for i in range(len(gmap)):
        record = torch.cat(
            [
                gmap.means[i],
                gmap.log_scales[i],
                gmap.rotations[i],
                gmap.opacity_logits[i : i + 1],
                gmap.colors[i],
                gmap.def_logits[i : i + 1],
            ]
        ).detach()
        lines.append("P " + _fmt(record.tolist()))
    for attr in ATTRIBUTES:
        bank = gmap.bases[attr]
        for r in range(len(bank)):
            lines.append(
                f"B {attr} {int(bank.owner[r])} {float(bank.center[r])!r} {float(bank.extent[r])!r} "
                f"{int(bank.frozen[r])} {int(bank.uid[r])} {_fmt(bank.weight[r].detach().tolist())}"
            )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_snapshot(path: str) -> CanonicalMap:
    with open(path, "r") as f:
        lines = f.read().splitlines()
    header = lines[0].split()
    if len(header) != 2 or header[0] != MAGIC:
        raise ShapeMismatch(f"{path!r} is not a map snapshot")
    if int(header[1]) != VERSION:
        raise ShapeMismatch(f"Unsupported snapshot version {header[1]} (expected {VERSION})")
    num_primitives = int(lines[1].split()[1])
    base_fields = lines[2].split()[1:]
    expected_bases = {base_fields[i]: int(base_fields[i + 1]) for i in range(0, len(base_fields), 2)}

    records = [list(map(float, line.split()[1:])) for line in lines[3:] if line.startswith("P ")]
    if len(records) != num_primitives:
        raise ShapeMismatch(f"Expected {num_primitives} primitive records, found {len(records)}")
    gmap = CanonicalMap()
    if records:
        data = as_tensor(records)
        gmap.add_primitives(
            means=data[:, 0:3],
            log_scales=data[:, 3:6],
            rotations=data[:, 6:10],
            opacity_logits=data[:, 10],
            colors=data[:, 11:14],
            def_logits=data[:, 14],
        )
        # add_primitives normalizes quaternions; keep the stored values verbatim
        gmap.rotations = data[:, 6:10].clone()

    for attr in ATTRIBUTES:
        rows = [line.split()[2:] for line in lines[3:] if line.startswith(f"B {attr} ")]
        if len(rows) != expected_bases.get(attr, 0):
            raise ShapeMismatch(f"Expected {expected_bases.get(attr, 0)} {attr} bases, found {len(rows)}")
        if not rows:
            continue
        dim = ATTRIBUTE_DIMS[attr]
        gmap.bases[attr].append(
            owner=[int(r[0]) for r in rows],
            center=[float(r[1]) for r in rows],
            extent=[float(r[2]) for r in rows],
            frozen=[bool(int(r[3])) for r in rows],
            weight=[[float(v) for v in r[5 : 5 + dim]] for r in rows],
        )
        # residual files refer to bases by uid
        bank = gmap.bases[attr]
        bank.uid = torch.as_tensor([int(r[4]) for r in rows], dtype=torch.long)
        bank.next_uid = int(bank.uid.max()) + 1
    gmap.rebuild_neighbors()
    return gmap
