from .base import FrameBundle, Priors, PriorProvider, Tracks, TrackSeeder, acquire_priors
from .masks import MaskSet, compute_masks, covis_mask, map_mask, track_mask, validity_mask
from .files import FilePriorProvider, SequenceDataset
from .oracle import OraclePriorProvider, PriorNoise, perturb_priors

PROVIDERS = {
    FilePriorProvider.name: FilePriorProvider,
    OraclePriorProvider.name: OraclePriorProvider,
}
