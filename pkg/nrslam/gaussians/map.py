"""The deformation-aware canonical Gaussian map and its evaluation at a query time."""

import hashlib
from dataclasses import dataclass, replace
from typing import Dict, Optional

import torch
from scipy.spatial import cKDTree

from nrslam.geometry import DTYPE, as_tensor, quat_normalize
from nrslam.gaussians.basis import ATTRIBUTES, FrameResiduals, TemporalBasisSet, attribute_offset
from nrslam.utils.exceptions import OutOfRange

PRIMITIVE_FIELDS = ("means", "log_scales", "rotations", "opacity_logits", "colors", "def_logits")
NEIGHBORS = 8


def logit(w) -> torch.Tensor:
    w = as_tensor(w)
    if bool(((w <= 0) | (w >= 1)).any()):
        raise OutOfRange(f"Probability must lie in (0, 1), got {w}")
    return torch.log(w) - torch.log1p(-w)


@dataclass
class GaussianPrimitive:
    mean: torch.Tensor
    log_scale: torch.Tensor
    rotation: torch.Tensor
    opacity_logit: torch.Tensor
    color: torch.Tensor
    def_logit: torch.Tensor

    @property
    def opacity(self) -> float:
        return float(torch.sigmoid(self.opacity_logit))

    @property
    def deformation_probability(self) -> float:
        return float(torch.sigmoid(self.def_logit))


def set_deformation_probability(primitive: GaussianPrimitive, w: float) -> GaussianPrimitive:
    """Returns a copy of ``primitive`` whose sigmoid(defLogit) equals ``w``."""
    return replace(primitive, def_logit=logit(w))


@dataclass(eq=False)
class GaussianSet:
    """Primitives in their deformed state, ready for rasterization."""

    means: torch.Tensor
    log_scales: torch.Tensor
    rotations: torch.Tensor
    opacities: torch.Tensor
    colors: torch.Tensor
    def_probs: torch.Tensor
    # per-primitive displacement blended into the traj3d channel
    displacement: Optional[torch.Tensor] = None

    def __len__(self):
        return int(self.means.shape[0])

    @classmethod
    def empty(cls) -> "GaussianSet":
        z3, z1 = torch.zeros(0, 3, dtype=DTYPE), torch.zeros(0, dtype=DTYPE)
        return cls(z3, z3.clone(), torch.zeros(0, 4, dtype=DTYPE), z1, z3.clone(), z1.clone())

    def permute(self, order: torch.Tensor) -> "GaussianSet":
        return GaussianSet(
            self.means[order],
            self.log_scales[order],
            self.rotations[order],
            self.opacities[order],
            self.colors[order],
            self.def_probs[order],
            None if self.displacement is None else self.displacement[order],
        )


class CanonicalMap:
    """Canonical primitives (tensor-of-structs) plus their temporal basis deformation field."""

    def __init__(self):
        self.means = torch.zeros(0, 3, dtype=DTYPE)
        self.log_scales = torch.zeros(0, 3, dtype=DTYPE)
        self.rotations = torch.zeros(0, 4, dtype=DTYPE)
        self.opacity_logits = torch.zeros(0, dtype=DTYPE)
        self.colors = torch.zeros(0, 3, dtype=DTYPE)
        self.def_logits = torch.zeros(0, dtype=DTYPE)
        self.bases = TemporalBasisSet()
        self.neighbor_edges = torch.zeros(2, 0, dtype=torch.long)

    def __len__(self):
        return int(self.means.shape[0])

    def __repr__(self):
        return f"CanonicalMap(primitives={len(self)}, bases={self.bases.total_count()}, active_bases={self.bases.active_count()})"

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def def_probs(self) -> torch.Tensor:
        return torch.sigmoid(self.def_logits)

    def primitive(self, index: int) -> GaussianPrimitive:
        return GaussianPrimitive(*(getattr(self, name)[index].detach().clone() for name in PRIMITIVE_FIELDS))

    def add_primitives(
        self,
        means: torch.Tensor,
        log_scales: torch.Tensor,
        rotations: Optional[torch.Tensor] = None,
        opacity_logits: Optional[torch.Tensor] = None,
        colors: Optional[torch.Tensor] = None,
        def_logits: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Appends primitives and returns their indices."""
        means = as_tensor(means).reshape(-1, 3)
        n = means.shape[0]
        if rotations is None:
            rotations = as_tensor([0.0, 0.0, 0.0, 1.0]).expand(n, 4)
        values = {
            "means": means,
            "log_scales": as_tensor(log_scales).reshape(n, 3),
            "rotations": quat_normalize(as_tensor(rotations).reshape(n, 4)),
            "opacity_logits": torch.zeros(n, dtype=DTYPE) if opacity_logits is None else as_tensor(opacity_logits).reshape(n),
            "colors": torch.full((n, 3), 0.5, dtype=DTYPE) if colors is None else as_tensor(colors).reshape(n, 3),
            "def_logits": torch.zeros(n, dtype=DTYPE) if def_logits is None else as_tensor(def_logits).reshape(n),
        }
        start = len(self)
        for name, value in values.items():
            setattr(self, name, torch.cat([getattr(self, name).detach(), value.detach().clone()]))
        self.bases.add_primitives(n)
        return torch.arange(start, start + n)

    def set_deformation_probability(self, indices, w: float):
        self.def_logits = self.def_logits.detach().clone()
        self.def_logits[indices] = logit(w)

    def rebuild_neighbors(self, k: int = NEIGHBORS) -> torch.Tensor:
        """Symmetric k-nearest-neighbour edges over canonical means, shape (2, E)."""
        n = len(self)
        if n < 2:
            self.neighbor_edges = torch.zeros(2, 0, dtype=torch.long)
            return self.neighbor_edges
        k = min(k, n - 1)
        tree = cKDTree(self.means.detach().numpy())
        _, idx = tree.query(self.means.detach().numpy(), k=k + 1)
        src = torch.arange(n).repeat_interleave(k)
        dst = torch.as_tensor(idx[:, 1:], dtype=torch.long).reshape(-1)
        edges = torch.cat([torch.stack([src, dst]), torch.stack([dst, src])], dim=1)
        self.neighbor_edges = torch.unique(edges, dim=1)
        return self.neighbor_edges

    def tensors(self) -> Dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in PRIMITIVE_FIELDS}

    def detach_(self) -> "CanonicalMap":
        for name in PRIMITIVE_FIELDS:
            setattr(self, name, getattr(self, name).detach())
        self.bases.detach_()
        return self

    def clone(self) -> "CanonicalMap":
        other = CanonicalMap()
        for name in PRIMITIVE_FIELDS:
            setattr(other, name, getattr(self, name).detach().clone())
        other.bases = self.bases.clone()
        other.neighbor_edges = self.neighbor_edges.clone()
        return other

    def checksum(self) -> str:
        """Digest over every stored parameter, used to assert bit-identical maps."""
        digest = hashlib.sha256()
        for name in PRIMITIVE_FIELDS:
            digest.update(getattr(self, name).detach().numpy().tobytes())
        for attr, bank in self.bases:
            digest.update(attr.encode())
            for name in ("owner", "center", "extent", "weight", "frozen", "uid"):
                digest.update(getattr(bank, name).detach().numpy().tobytes())
        return digest.hexdigest()


def deform(
    gmap: CanonicalMap,
    t: float,
    residuals: Optional[FrameResiduals] = None,
    gate: Optional[torch.Tensor] = None,
) -> GaussianSet:
    """A(t) = A_c + g * Delta_A(t) for mean, log-scale and rotation; g = w_d unless ``gate`` overrides it."""
    def_probs = torch.sigmoid(gmap.def_logits)
    g = def_probs if gate is None else torch.as_tensor(gate, dtype=DTYPE).expand(len(gmap))
    g = g.unsqueeze(-1)
    offsets = {attr: attribute_offset(gmap.bases, attr, t, residuals) for attr in ATTRIBUTES}
    return GaussianSet(
        means=gmap.means + g * offsets["mean"],
        log_scales=gmap.log_scales + g * offsets["scale"],
        rotations=quat_normalize(gmap.rotations + g * offsets["rotation"]),
        opacities=torch.sigmoid(gmap.opacity_logits),
        colors=gmap.colors,
        def_probs=def_probs,
    )


def canonical(gmap: CanonicalMap) -> GaussianSet:
    """The static map, no deformation applied."""
    return GaussianSet(
        means=gmap.means,
        log_scales=gmap.log_scales,
        rotations=quat_normalize(gmap.rotations),
        opacities=torch.sigmoid(gmap.opacity_logits),
        colors=gmap.colors,
        def_probs=torch.sigmoid(gmap.def_logits),
    )


def initial_scale(depth: torch.Tensor, focal: float, stride: float) -> torch.Tensor:
    """Isotropic log-scale covering one sampling cell of ``stride`` pixels at ``depth``."""
    return torch.log(as_tensor(depth) * (0.5 * stride / focal)).unsqueeze(-1).expand(-1, 3).clone()
