"""Per-attribute 1D Gaussian temporal bases and per-frame residual corrections.

Bases of one attribute are stored flat across the whole map (``BasisBank``); ``owner`` ties
each row to its primitive and ``uid`` gives it an identity that survives insertion, removal
and merging, so per-frame residuals can be re-aligned after the bank changes shape.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import torch

from nrslam.geometry import DTYPE, as_tensor
from nrslam.utils.exceptions import NonPositiveExtent

ATTRIBUTES = ("mean", "scale", "rotation")
ATTRIBUTE_DIMS = {"mean": 3, "scale": 3, "rotation": 4}
MIN_EXTENT = 1e-6


def basis_eval(t, tau, sigma) -> torch.Tensor:
    """phi(t; tau, sigma) = exp(-(t - tau)^2 / (2 sigma^2))."""
    t, tau, sigma = as_tensor(t), as_tensor(tau), as_tensor(sigma)
    if bool((sigma <= 0).any()):
        raise NonPositiveExtent(f"Temporal extent must be positive, got {sigma.min().item()}")
    return torch.exp(-((t - tau) ** 2) / (2 * sigma**2))


@dataclass
class TemporalBasis:
    center: float
    extent: float
    weight: torch.Tensor
    frozen: bool = False


class BasisBank:
    """All temporal bases of one attribute across the map."""

    def __init__(self, attribute: str):
        if attribute not in ATTRIBUTE_DIMS:
            raise ValueError(f"Unknown attribute {attribute!r}. Please choose from {ATTRIBUTES}")
        self.attribute = attribute
        self.dim = ATTRIBUTE_DIMS[attribute]
        self.owner = torch.zeros(0, dtype=torch.long)
        self.center = torch.zeros(0, dtype=DTYPE)
        self.extent = torch.zeros(0, dtype=DTYPE)
        self.weight = torch.zeros(0, self.dim, dtype=DTYPE)
        self.frozen = torch.zeros(0, dtype=torch.bool)
        self.uid = torch.zeros(0, dtype=torch.long)
        self.next_uid = 0

    def __len__(self):
        return int(self.owner.shape[0])

    def __repr__(self):
        return f"BasisBank(attribute={self.attribute!r}, size={len(self)}, frozen={int(self.frozen.sum())})"

    def append(self, owner, center, extent, weight=None, frozen=None) -> torch.Tensor:
        """Appends bases; returns the uids handed out to them."""
        owner = torch.as_tensor(owner, dtype=torch.long).reshape(-1)
        n = owner.shape[0]
        center = as_tensor(center).reshape(-1).expand(n).clone()
        extent = as_tensor(extent).reshape(-1).expand(n).clone()
        if bool((extent <= MIN_EXTENT).any()):
            raise NonPositiveExtent(f"Temporal extents must exceed {MIN_EXTENT}")
        weight = torch.zeros(n, self.dim, dtype=DTYPE) if weight is None else as_tensor(weight).reshape(n, self.dim)
        frozen = torch.zeros(n, dtype=torch.bool) if frozen is None else torch.as_tensor(frozen, dtype=torch.bool).reshape(n)
        uids = torch.arange(self.next_uid, self.next_uid + n, dtype=torch.long)
        self.next_uid += n

        self.owner = torch.cat([self.owner, owner])
        self.center = torch.cat([self.center.detach(), center])
        self.extent = torch.cat([self.extent.detach(), extent])
        self.weight = torch.cat([self.weight.detach(), weight.detach()])
        self.frozen = torch.cat([self.frozen, frozen])
        self.uid = torch.cat([self.uid, uids])
        return uids

    def keep(self, mask: torch.Tensor):
        """Drops every row where ``mask`` is False."""
        self.owner = self.owner[mask]
        self.center = self.center.detach()[mask]
        self.extent = self.extent.detach()[mask]
        self.weight = self.weight.detach()[mask]
        self.frozen = self.frozen[mask]
        self.uid = self.uid[mask]

    def phi(self, t) -> torch.Tensor:
        return basis_eval(t, self.center, self.extent) if len(self) else torch.zeros(0, dtype=DTYPE)

    def offset(self, t, num_primitives: int, residual: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Per-primitive sum of (w + dw) * phi(t); ``residual`` is dense, aligned with the rows."""
        out = torch.zeros(num_primitives, self.dim, dtype=DTYPE)
        if not len(self):
            return out
        weight = self.weight if residual is None else self.weight + residual
        return out.index_add(0, self.owner, weight * self.phi(t).unsqueeze(-1))

    def coverage(self, t, num_primitives: int) -> torch.Tensor:
        out = torch.zeros(num_primitives, dtype=DTYPE)
        if not len(self):
            return out
        return out.index_add(0, self.owner, self.phi(t).detach())

    def counts(self, num_primitives: int, active_only: bool = False) -> torch.Tensor:
        owner = self.owner[~self.frozen] if active_only else self.owner
        return torch.bincount(owner, minlength=num_primitives)

    def rows_of(self, uids: torch.Tensor):
        """Row index of each uid and a mask of the uids still present in the bank."""
        if not len(self) or not len(uids):
            return torch.zeros(len(uids), dtype=torch.long), torch.zeros(len(uids), dtype=torch.bool)
        rows = torch.searchsorted(self.uid, uids).clamp(max=len(self) - 1)
        return rows, self.uid[rows] == uids

    def for_primitive(self, index: int) -> List[TemporalBasis]:
        rows = torch.nonzero(self.owner == index).flatten()
        rows = rows[torch.argsort(self.center[rows].detach(), stable=True)]
        return [
            TemporalBasis(
                center=float(self.center[r]),
                extent=float(self.extent[r]),
                weight=self.weight[r].detach().clone(),
                frozen=bool(self.frozen[r]),
            )
            for r in rows.tolist()
        ]

    def detach_(self):
        self.center = self.center.detach()
        self.extent = self.extent.detach()
        self.weight = self.weight.detach()

    def clone(self) -> "BasisBank":
        other = BasisBank(self.attribute)
        for name in ("owner", "center", "extent", "weight", "frozen", "uid"):
            setattr(other, name, getattr(self, name).detach().clone())
        other.next_uid = self.next_uid
        return other


class TemporalBasisSet:
    """The deformation field of a map: one ``BasisBank`` per deformable attribute."""

    def __init__(self, num_primitives: int = 0):
        self.num_primitives = num_primitives
        self.banks: Dict[str, BasisBank] = {attr: BasisBank(attr) for attr in ATTRIBUTES}

    def __getitem__(self, attribute: str) -> BasisBank:
        return self.banks[attribute]

    def __iter__(self):
        return iter(self.banks.items())

    def __repr__(self):
        return f"TemporalBasisSet(num_primitives={self.num_primitives}, banks={list(self.banks.values())})"

    def add_primitives(self, n: int):
        self.num_primitives += n

    def for_primitive(self, index: int) -> Dict[str, List[TemporalBasis]]:
        return {attr: bank.for_primitive(index) for attr, bank in self.banks.items()}

    def active_count(self) -> int:
        return sum(int((~bank.frozen).sum()) for bank in self.banks.values())

    def total_count(self) -> int:
        return sum(len(bank) for bank in self.banks.values())

    def detach_(self):
        for bank in self.banks.values():
            bank.detach_()

    def clone(self) -> "TemporalBasisSet":
        other = TemporalBasisSet(self.num_primitives)
        other.banks = {attr: bank.clone() for attr, bank in self.banks.items()}
        return other


def attribute_offset(bases: TemporalBasisSet, attribute: str, t, residuals: Optional["FrameResiduals"] = None):
    """Delta_A(t) = sum_k (w_k + dw_k) phi(t; tau_k, sigma_k) for every primitive, shape (N, dim)."""
    bank = bases[attribute]
    residual = None if residuals is None or residuals.is_empty else residuals.dense(bank)
    return bank.offset(t, bases.num_primitives, residual)


def temporal_coverage(bases: TemporalBasisSet, attribute: str, t) -> torch.Tensor:
    """C_A(t) = sum_k phi(t; tau_k, sigma_k), frozen bases included, shape (N,)."""
    return bases[attribute].coverage(t, bases.num_primitives)


@dataclass
class FrameResiduals:
    """Per-frame additive corrections dw to basis weights, keyed by basis uid."""

    time: float
    uids: Dict[str, torch.Tensor] = field(default_factory=dict)
    values: Dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def empty(cls, time: float) -> "FrameResiduals":
        return cls(
            time=float(time),
            uids={attr: torch.zeros(0, dtype=torch.long) for attr in ATTRIBUTES},
            values={attr: torch.zeros(0, ATTRIBUTE_DIMS[attr], dtype=DTYPE) for attr in ATTRIBUTES},
        )

    @classmethod
    def allocate(
        cls,
        bases: TemporalBasisSet,
        time: float,
        active: torch.Tensor,
        warm_start: Optional["FrameResiduals"] = None,
        attributes: Iterable[str] = ATTRIBUTES,
    ) -> "FrameResiduals":
        """Zero residuals on every non-frozen basis owned by an ``active`` primitive, warm-started by uid."""
        residuals = cls.empty(time)
        for attr in attributes:
            bank = bases[attr]
            if not len(bank):
                continue
            rows = active[bank.owner] & ~bank.frozen
            uids = bank.uid[rows]
            residuals.uids[attr] = uids
            residuals.values[attr] = (
                warm_start.values_for(attr, uids)
                if warm_start is not None
                else torch.zeros(len(uids), bank.dim, dtype=DTYPE)
            )
        return residuals

    @property
    def is_empty(self) -> bool:
        return all(v.numel() == 0 for v in self.values.values())

    def __len__(self):
        return sum(int(u.numel()) for u in self.uids.values())

    def parameters(self) -> List[torch.Tensor]:
        return [v for v in self.values.values() if v.numel()]

    def requires_grad_(self, flag: bool = True) -> "FrameResiduals":
        for attr, value in self.values.items():
            self.values[attr] = value.detach().requires_grad_(flag)
        return self

    def detach(self) -> "FrameResiduals":
        return FrameResiduals(
            time=self.time,
            uids={a: u.clone() for a, u in self.uids.items()},
            values={a: v.detach().clone() for a, v in self.values.items()},
        )

    def dense(self, bank: BasisBank) -> torch.Tensor:
        """Residual rows aligned with ``bank``; rows without a residual are zero."""
        out = torch.zeros(len(bank), bank.dim, dtype=DTYPE)
        uids = self.uids.get(bank.attribute)
        if uids is None or not len(uids) or not len(bank):
            return out
        rows, found = bank.rows_of(uids)
        return out.index_add(0, rows[found], self.values[bank.attribute][found])

    def values_for(self, attribute: str, uids: torch.Tensor) -> torch.Tensor:
        """Values at the requested uids (zero where this frame has none)."""
        out = torch.zeros(len(uids), ATTRIBUTE_DIMS[attribute], dtype=DTYPE)
        own = self.uids.get(attribute)
        if own is None or not len(own) or not len(uids):
            return out
        pos = torch.searchsorted(own, uids).clamp(max=len(own) - 1)
        found = own[pos] == uids
        out[found] = self.values[attribute].detach()[pos[found]]
        return out

    def squared_norm(self) -> torch.Tensor:
        total = torch.zeros((), dtype=DTYPE)
        for value in self.values.values():
            total = total + (value**2).sum()
        return total

    def squared_difference(self, other: Optional["FrameResiduals"]) -> torch.Tensor:
        """||dw_t - dw_{t-1}||^2 over this frame's uids."""
        if other is None:
            return self.squared_norm()
        total = torch.zeros((), dtype=DTYPE)
        for attr, value in self.values.items():
            total = total + ((value - other.values_for(attr, self.uids[attr])) ** 2).sum()
        return total

    def apply_merges(self, attribute: str, groups: List[tuple]):
        """Folds residuals of merged bases into the merged basis: ``groups`` holds (old uids, new uid)."""
        uids, values = self.uids.get(attribute), self.values.get(attribute)
        if uids is None or not len(uids) or not groups:
            return
        uids, values = uids.tolist(), values.detach()
        lookup = {u: i for i, u in enumerate(uids)}
        drop, new_uids, new_values = set(), [], []
        for old, new in groups:
            rows = [lookup[u] for u in old if u in lookup]
            if not rows:
                continue
            drop.update(rows)
            new_uids.append(new)
            new_values.append(values[rows].sum(0))
        keep = [i for i in range(len(uids)) if i not in drop]
        merged_uids = torch.as_tensor([uids[i] for i in keep] + new_uids, dtype=torch.long)
        merged_values = torch.cat([values[keep], torch.stack(new_values)]) if new_values else values[keep]
        order = torch.argsort(merged_uids)
        self.uids[attribute] = merged_uids[order]
        self.values[attribute] = merged_values[order]

    def restrict(self, bases: TemporalBasisSet):
        """Drops residuals whose basis no longer exists."""
        for attr in list(self.uids):
            _, found = bases[attr].rows_of(self.uids[attr])
            self.uids[attr] = self.uids[attr][found]
            self.values[attr] = self.values[attr].detach()[found]

    def state_dict(self) -> dict:
        return {"time": self.time, "uids": self.uids, "values": {a: v.detach() for a, v in self.values.items()}}

    @classmethod
    def from_state_dict(cls, state: dict) -> "FrameResiduals":
        return cls(time=float(state["time"]), uids=dict(state["uids"]), values=dict(state["values"]))
