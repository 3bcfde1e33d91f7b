"""Patch-level implicit neural representations for image segmentation.

Images are encoded into a grid of patch shape embeddings plus one global
embedding; small MLPs decode per-coordinate class occupancy, trained on
boundary-biased sampled points and reconstructed at any resolution.
"""

from .geometry import Connectivity, PatchGridSpec, PatchIndex
from .losses import LossConfig
from .model import ModelConfig, SegmentationModel, load_checkpoint, save_checkpoint
from .sampling import OccupancySample, SamplingConfig
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Connectivity",
    "PatchGridSpec",
    "PatchIndex",
    "LossConfig",
    "ModelConfig",
    "SegmentationModel",
    "load_checkpoint",
    "save_checkpoint",
    "OccupancySample",
    "SamplingConfig",
    "TrainConfig",
    "train",
    "__version__",
]
