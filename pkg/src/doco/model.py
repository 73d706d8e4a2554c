"""Whole-model configuration and parameter construction."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .aggregation import AggregationConfig, init_roi
from .encoders import MultimodalConfig, VisionEncoderConfig, init_multimodal, init_projection, init_vision
from .errors import ConfigurationError
from .losses import SimilarityConfig, init_temperature
from .numerics import ParameterStore

TRAINABLE_PREFIXES = ("vision.", "roi.", "proj.", "temp.")
FROZEN_PREFIXES = ("mm.",)


@dataclass
class ModelConfig:
    vision: VisionEncoderConfig = field(default_factory=VisionEncoderConfig)
    multimodal: MultimodalConfig = field(default_factory=MultimodalConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    seed: int = 0

    def __post_init__(self):
        if self.vision.image_size != self.multimodal.image_size:
            raise ConfigurationError("vision and multimodal encoders must share the image size")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d or {})
        return cls(
            vision=VisionEncoderConfig(**d.pop("vision", {})),
            multimodal=MultimodalConfig(**d.pop("multimodal", {})),
            aggregation=AggregationConfig(**d.pop("aggregation", {})),
            similarity=SimilarityConfig(**d.pop("similarity", {})),
            **d,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def build_store(config: ModelConfig) -> ParameterStore:
    """Fresh parameters: trainable vision side plus the frozen multimodal backbone."""
    store = ParameterStore(seed=config.seed)
    rng = np.random.default_rng(config.seed)
    init_vision(store, config.vision, rng)
    init_roi(store, config.vision.dim, rng)
    init_projection(store, config.multimodal.dim, config.vision.dim, rng)
    init_temperature(store, config.similarity)
    init_multimodal(store, config.multimodal)
    store.config = {"model": config.to_dict()}
    return store


def frozen_names(store: ParameterStore) -> list[str]:
    return [n for n in store if n.startswith(FROZEN_PREFIXES)]
