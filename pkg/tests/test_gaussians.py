import math

import pytest
import torch

from nrslam.geometry import DTYPE, as_tensor
from nrslam.gaussians import (
    CanonicalMap,
    FrameResiduals,
    attribute_offset,
    basis_eval,
    deform,
    load_snapshot,
    logit,
    save_snapshot,
    set_deformation_probability,
    temporal_coverage,
)
from nrslam.utils.exceptions import NonPositiveExtent, OutOfRange, ShapeMismatch


def make_map(n: int = 4) -> CanonicalMap:
    gmap = CanonicalMap()
    gmap.add_primitives(
        means=torch.arange(3 * n, dtype=DTYPE).reshape(n, 3),
        log_scales=torch.zeros(n, 3, dtype=DTYPE),
        def_logits=torch.zeros(n, dtype=DTYPE),
    )
    for attr in ("mean", "scale", "rotation"):
        gmap.bases[attr].append(torch.arange(n), 0.25, 0.1)
        gmap.bases[attr].append(torch.arange(n), 0.75, 0.1)
    return gmap


def test_basis_eval_peaks_at_center():
    assert float(basis_eval(0.3, 0.3, 0.1)) == 1.0
    assert math.isclose(float(basis_eval(0.4, 0.3, 0.1)), math.exp(-0.5), rel_tol=1e-12)


def test_basis_eval_rejects_non_positive_extent():
    with pytest.raises(NonPositiveExtent):
        basis_eval(0.0, 0.0, 0.0)


@pytest.mark.parametrize("w", [0.0, 1.0, -0.1, 1.5])
def test_logit_rejects_probabilities_outside_open_interval(w):
    with pytest.raises(OutOfRange):
        logit(w)


@pytest.mark.parametrize("w", [1e-6, 0.25, 0.5, 0.9])
def test_set_deformation_probability(w):
    primitive = set_deformation_probability(make_map().primitive(0), w)
    assert math.isclose(primitive.deformation_probability, w, rel_tol=1e-9)


def test_zero_weights_leave_map_canonical():
    gmap = make_map()
    deformed = deform(gmap, 0.5)
    assert torch.equal(deformed.means, gmap.means)
    assert torch.equal(deformed.log_scales, gmap.log_scales)


def test_deformation_is_gated_by_probability():
    gmap = make_map()
    gmap.bases["mean"].weight = torch.ones(len(gmap.bases["mean"]), 3, dtype=DTYPE)
    gmap.set_deformation_probability([0, 1], 0.25)
    offset = float(basis_eval(0.25, 0.25, 0.1)) + float(basis_eval(0.25, 0.75, 0.1))
    moved = deform(gmap, 0.25).means - gmap.means
    assert torch.allclose(moved[0], torch.full((3,), 0.25 * offset, dtype=DTYPE), atol=1e-12)
    assert torch.allclose(moved[2], torch.full((3,), 0.5 * offset, dtype=DTYPE), atol=1e-12)
    rigid = deform(gmap, 0.25, gate=0.0).means
    full = deform(gmap, 0.25, gate=1.0).means - gmap.means
    assert torch.equal(rigid, gmap.means), "gate 0 switches deformation off"
    assert torch.allclose(full, torch.full_like(full, offset), atol=1e-12), "gate 1 applies the full offset"


def test_residuals_allocate_only_on_active_bases():
    gmap = make_map()
    gmap.bases["mean"].frozen[0] = True
    active = torch.tensor([True, False, True, False])
    residuals = FrameResiduals.allocate(gmap.bases, 0.5, active)
    owners = gmap.bases["mean"].owner[gmap.bases["mean"].rows_of(residuals.uids["mean"])[0]]
    assert set(owners.tolist()) == {0, 2}
    assert len(residuals.uids["mean"]) == 3, "the frozen basis of primitive 0 gets no residual"
    assert residuals.squared_norm() == 0


def test_residuals_follow_uids_through_bank_changes():
    gmap = make_map()
    bank = gmap.bases["mean"]
    residuals = FrameResiduals.allocate(gmap.bases, 0.5, torch.ones(len(gmap), dtype=torch.bool))
    residuals.values["mean"] = torch.arange(len(bank) * 3, dtype=DTYPE).reshape(-1, 3)
    target_uid = int(bank.uid[5])
    expected = residuals.values["mean"][5].clone()

    keep = torch.ones(len(bank), dtype=torch.bool)
    keep[:3] = False
    bank.keep(keep)
    residuals.restrict(gmap.bases)
    dense = residuals.dense(bank)
    row = int(torch.nonzero(bank.uid == target_uid))
    assert len(residuals.uids["mean"]) == len(bank)
    assert torch.equal(dense[row], expected)


def test_residual_merges_sum_folded_values():
    residuals = FrameResiduals.empty(0.0)
    residuals.uids["mean"] = torch.tensor([1, 2, 3])
    residuals.values["mean"] = as_tensor([[1.0, 0, 0], [2.0, 0, 0], [4.0, 0, 0]])
    residuals.apply_merges("mean", [([1, 3], 9)])
    assert residuals.uids["mean"].tolist() == [2, 9]
    assert residuals.values["mean"][:, 0].tolist() == [2.0, 5.0]


def test_squared_difference_against_missing_previous_is_norm():
    residuals = FrameResiduals.empty(0.0)
    residuals.uids["scale"] = torch.tensor([4])
    residuals.values["scale"] = as_tensor([[1.0, 2.0, 2.0]])
    assert float(residuals.squared_difference(None)) == 9.0
    previous = FrameResiduals.empty(0.0)
    previous.uids["scale"] = torch.tensor([4])
    previous.values["scale"] = as_tensor([[1.0, 2.0, 0.0]])
    assert float(residuals.squared_difference(previous)) == 4.0


def test_neighbors_are_symmetric():
    gmap = make_map(6)
    edges = gmap.rebuild_neighbors(2)
    pairs = set(map(tuple, edges.t().tolist()))
    assert all((j, i) in pairs for i, j in pairs)
    assert all(i != j for i, j in pairs)


def test_snapshot_round_trip_keeps_parameters_and_uids(tmp_path):
    gmap = make_map()
    bank = gmap.bases["scale"]
    bank.weight = torch.randn(len(bank), 3, dtype=DTYPE)
    bank.frozen[1] = True
    bank.keep(torch.arange(len(bank)) != 0)
    path = str(tmp_path / "map.txt")
    save_snapshot(gmap, path)
    loaded = load_snapshot(path)

    assert loaded.checksum() == gmap.checksum(), "snapshot must restore every parameter bit for bit"
    assert loaded.bases["scale"].uid.tolist() == bank.uid.tolist()
    assert loaded.bases["scale"].next_uid == int(bank.uid.max()) + 1


def test_snapshot_rejects_foreign_files(tmp_path):
    path = tmp_path / "other.txt"
    path.write_text("something else\n")
    with pytest.raises(ShapeMismatch):
        load_snapshot(str(path))


def test_attribute_offset_adds_frame_residuals():
    gmap = CanonicalMap()
    gmap.add_primitives(means=torch.zeros(1, 3, dtype=DTYPE), log_scales=torch.zeros(1, 3, dtype=DTYPE))
    gmap.bases["mean"].append([0], 0.5, 0.1, weight=as_tensor([[1.0, 2.0, 0.0]]))
    residuals = FrameResiduals.allocate(gmap.bases, 0.5, torch.ones(1, dtype=torch.bool))
    residuals.values["mean"] = as_tensor([[0.5, 0.0, 0.0]])

    assert torch.allclose(attribute_offset(gmap.bases, "mean", 0.5), as_tensor([[1.0, 2.0, 0.0]]), atol=1e-12)
    assert torch.allclose(attribute_offset(gmap.bases, "mean", 0.5, residuals), as_tensor([[1.5, 2.0, 0.0]]), atol=1e-12)
    decayed = math.exp(-0.5) * as_tensor([[1.0, 2.0, 0.0]])
    assert torch.allclose(attribute_offset(gmap.bases, "mean", 0.6), decayed, atol=1e-12)
    assert torch.equal(attribute_offset(gmap.bases, "scale", 0.5), torch.zeros(1, 3, dtype=DTYPE)), "no scale bases"


def test_temporal_coverage_counts_frozen_bases():
    gmap = make_map()
    expected = torch.full((4,), 1.0 + math.exp(-12.5), dtype=DTYPE)
    assert torch.allclose(temporal_coverage(gmap.bases, "mean", 0.25), expected, atol=1e-12)
    gmap.bases["mean"].frozen[:] = True
    assert torch.allclose(temporal_coverage(gmap.bases, "mean", 0.25), expected, atol=1e-12)
