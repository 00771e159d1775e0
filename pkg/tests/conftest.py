import numpy as np
import pytest

from semdiff import data as datamod
from semdiff.unet import DenoiserConfig, Variant


@pytest.fixture(scope="session")
def toy_records():
    return datamod.generate_toy_dataset(4, 3, 32, seed=7)


@pytest.fixture(scope="session")
def toy_dataset(toy_records):
    return datamod.SliceDataset(toy_records)


def tiny_concat_config(num_mask_classes: int = 2) -> DenoiserConfig:
    """Single-level CONCAT net under 1e3 parameters for finite-difference checks."""
    return DenoiserConfig(image_size=8, base_width=4, channel_multipliers=(1,),
                          num_res_blocks_per_level=1, attention_resolutions=(),
                          num_mask_classes=num_mask_classes, variant=Variant.CONCAT,
                          time_embed_multiplier=1)


def small_variant_config(variant, image_size=32) -> DenoiserConfig:
    return DenoiserConfig(image_size=image_size, base_width=8,
                          channel_multipliers=(1, 2), num_res_blocks_per_level=1,
                          attention_resolutions=(image_size // 2,),
                          num_mask_classes=4, variant=variant)


def onehot_batch(rng, batch, classes, size):
    labels = rng.integers(0, classes, (batch, size, size))
    onehot = np.zeros((batch, classes, size, size), dtype=np.float32)
    for c in range(classes):
        onehot[:, c][labels == c] = 1.0
    return labels, onehot
