import numpy as np
import pytest
import torch

from patchseg.data import SyntheticCorpusSpec, generate_corpus, load_mask
from patchseg.model import ModelConfig, SegmentationModel
from patchseg.sampling import (
    SamplingConfig,
    derive_image_seed,
    sample_points,
    save_points,
)

TINY_MODEL = dict(
    widths=(4, 4, 8, 8, 8),
    blocks_per_stage=1,
    d=8,
    patch_size=32,
    patch_hidden=(16, 16),
    image_hidden=(16, 8),
)


def make_tiny_model(seed=0, **overrides) -> SegmentationModel:
    torch.manual_seed(seed)
    return SegmentationModel(ModelConfig(**{**TINY_MODEL, **overrides}))


def sample_corpus_points(manifest, n_background=300, n_foreground=200, seed=123):
    for idx, image_id in enumerate(manifest.ids()):
        mask = load_mask(manifest.mask_path(image_id))
        cfg = SamplingConfig(
            n_background=n_background,
            n_foreground_per_class=n_foreground,
            seed=derive_image_seed(seed, idx),
        )
        samples, report = sample_points(mask, cfg, num_classes=manifest.num_classes)
        save_points(manifest.points_path(image_id), samples, cfg, report, manifest.num_classes)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """10-image 64x64 corpus with point files; patch grid is 2x2."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    manifest = generate_corpus(SyntheticCorpusSpec(n_images=10, size=64, seed=11), out)
    sample_corpus_points(manifest)
    return manifest
