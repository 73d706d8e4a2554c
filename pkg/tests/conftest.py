import numpy as np
import pytest

from doco.aggregation import AggregationConfig
from doco.data import SynthConfig, generate_dataset
from doco.encoders import MultimodalConfig, VisionEncoderConfig
from doco.losses import SimilarityConfig
from doco.model import ModelConfig, build_store


def tiny_model(image_size=16, **agg) -> ModelConfig:
    return ModelConfig(
        vision=VisionEncoderConfig(image_size=image_size, patch_size=8, dim=8, layers=1, heads=2),
        multimodal=MultimodalConfig(image_size=image_size, patch_size=8, dim=12, layers=1, heads=2,
                                    max_tokens=8, layout_bins=4),
        aggregation=AggregationConfig(**agg),
        similarity=SimilarityConfig(),
        seed=7,
    )


def small_model() -> ModelConfig:
    """32x32 images, 4x4 patch grid; still cheap enough for training tests."""
    return ModelConfig(
        vision=VisionEncoderConfig(image_size=32, patch_size=8, dim=16, layers=1, heads=2),
        multimodal=MultimodalConfig(image_size=32, patch_size=8, dim=16, layers=1, heads=2,
                                    max_tokens=8, layout_bins=8),
        seed=3,
    )


@pytest.fixture
def model():
    return tiny_model()


@pytest.fixture
def store(model):
    return build_store(model)


@pytest.fixture(scope="session")
def small_synth():
    return SynthConfig(seed=11, image_size=32, n_objects_range=(1, 3), glyph_size=7)


@pytest.fixture(scope="session")
def small_data(small_synth):
    return generate_dataset(small_synth, 12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
