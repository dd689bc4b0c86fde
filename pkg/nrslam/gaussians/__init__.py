from .basis import (
    ATTRIBUTES,
    ATTRIBUTE_DIMS,
    BasisBank,
    FrameResiduals,
    TemporalBasis,
    TemporalBasisSet,
    attribute_offset,
    basis_eval,
    temporal_coverage,
)
from .map import (
    CanonicalMap,
    GaussianPrimitive,
    GaussianSet,
    canonical,
    deform,
    logit,
    set_deformation_probability,
)
from .snapshot import load_snapshot, save_snapshot
