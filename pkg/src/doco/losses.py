"""Object-level contrastive objective.

Intra term: symmetric InfoNCE over the (N+1) x (N+1) visual/multimodal
pairings inside one image. Inter term: the same over per-image mean-pooled
features across the batch. Total = intra (averaged over images) + inter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, DimensionError
from .numerics import ParameterStore, Tensor

TAU_MIN, TAU_MAX = 1e-3, 100.0


@dataclass
class SimilarityConfig:
    temperature: float = 0.07
    trainable_temperature: bool = True
    normalize: bool = True

    def __post_init__(self):
        if not TAU_MIN <= self.temperature <= TAU_MAX:
            raise ConfigurationError(f"temperature {self.temperature} outside [{TAU_MIN}, {TAU_MAX}]")

    @classmethod
    def raw(cls) -> "SimilarityConfig":
        """Plain dot-product similarity at unit temperature."""
        return cls(temperature=1.0, trainable_temperature=False, normalize=False)


def init_temperature(store: ParameterStore, config: SimilarityConfig) -> None:
    if config.trainable_temperature:
        store.add("temp.log_tau", np.array(math.log(config.temperature)))


def logit_scale(config: SimilarityConfig, params: ParameterStore | None = None):
    """``1/tau`` as a float, or as a tensor when the temperature is trainable."""
    if config.trainable_temperature and params is not None and "temp.log_tau" in params:
        log_tau = nx.clip(params["temp.log_tau"], math.log(TAU_MIN), math.log(TAU_MAX))
        return nx.exp(-log_tau)
    return 1.0 / config.temperature


def temperature_value(config: SimilarityConfig, params: ParameterStore | None = None) -> float:
    scale = logit_scale(config, params)
    return 1.0 / float(scale.data if isinstance(scale, Tensor) else scale)


def similarity_matrix(a, b, config: SimilarityConfig | None = None, scale=None) -> Tensor:
    """Cosine similarity of rows of ``a`` against rows of ``b``, divided by tau."""
    config = config or SimilarityConfig(trainable_temperature=False)
    a, b = nx.as_tensor(a), nx.as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"feature widths differ: {a.shape} vs {b.shape}")
    if config.normalize:
        a, b = nx.l2_normalize(a), nx.l2_normalize(b)
    if scale is None:
        scale = 1.0 / config.temperature
    return nx.matmul(a, b.T) * scale


def symmetric_info_nce(sim: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """(mean of both directions, row direction, column direction)."""
    n = sim.shape[0]
    if sim.shape != (n, n):
        raise DimensionError(f"similarity matrix must be square, got {sim.shape}")
    idx = np.arange(n)
    diag = sim[idx, idx]
    lx = nx.mean(nx.logsumexp(sim, axis=1) - diag)
    ly = nx.mean(nx.logsumexp(sim, axis=0) - diag)
    return (lx + ly) * 0.5, lx, ly


def intra_doco_loss(visual, multimodal, config: SimilarityConfig | None = None, scale=None) -> Tensor:
    visual, multimodal = nx.as_tensor(visual), nx.as_tensor(multimodal)
    if visual.shape[0] != multimodal.shape[0]:
        raise DimensionError(f"row counts differ: {visual.shape[0]} vs {multimodal.shape[0]}")
    return symmetric_info_nce(similarity_matrix(visual, multimodal, config, scale))[0]


@dataclass
class DoCoBatch:
    """Per-image (aggregated visual, projected multimodal) feature pairs.

    ``global_rows`` gives the row index of the whole-image object in each
    pair; only the image-level baseline needs it.
    """

    pairs: list[tuple[Tensor, Tensor]]
    global_rows: list[int] | None = None

    def __post_init__(self):
        if not self.pairs:
            raise DimensionError("a batch needs at least one image")
        for i, (v, m) in enumerate(self.pairs):
            if v.shape[0] != m.shape[0]:
                raise DimensionError(f"image {i}: {v.shape[0]} visual rows vs {m.shape[0]} multimodal rows")


def pooled_features(batch: DoCoBatch, image_level: bool = False) -> tuple[Tensor, Tensor]:
    """(B, d) pooled visual and multimodal features.

    Mean over all rows of each image, or just the global row when
    ``image_level`` is set.
    """
    vs, ms = [], []
    for i, (v, m) in enumerate(batch.pairs):
        if image_level:
            g = batch.global_rows[i] if batch.global_rows is not None else v.shape[0] - 1
            vs.append(v[g:g + 1])
            ms.append(m[g:g + 1])
        else:
            vs.append(nx.mean(v, axis=0, keepdims=True))
            ms.append(nx.mean(m, axis=0, keepdims=True))
    return nx.concat(vs, axis=0), nx.concat(ms, axis=0)


def inter_doco_loss(batch: DoCoBatch, config: SimilarityConfig | None = None, scale=None,
                    image_level: bool = False) -> Tensor:
    v, m = pooled_features(batch, image_level)
    return symmetric_info_nce(similarity_matrix(v, m, config, scale))[0]


@dataclass
class LossReport:
    intra: float
    inter: float
    total: float
    per_direction: tuple[float, float, float, float]
    tensor: Tensor = field(repr=False, compare=False, default=None)


def doco_loss(batch: DoCoBatch, config: SimilarityConfig | None = None,
              params: ParameterStore | None = None, intra: bool = True, inter: bool = True,
              image_level: bool = False) -> LossReport:
    """Total contrastive loss with its components.

    ``image_level`` replaces the inter term's object mean by the global
    object's row (the whole-image contrast baseline).
    """
    config = config or SimilarityConfig(trainable_temperature=False)
    scale = logit_scale(config, params)
    zero = Tensor(0.0)
    intra_t, ix, iy = zero, zero, zero
    if intra:
        terms = [symmetric_info_nce(similarity_matrix(v, m, config, scale)) for v, m in batch.pairs]
        b = len(terms)
        intra_t = nx.concat([t[0].reshape(1) for t in terms]).sum() * (1.0 / b)
        ix = nx.concat([t[1].reshape(1) for t in terms]).sum() * (1.0 / b)
        iy = nx.concat([t[2].reshape(1) for t in terms]).sum() * (1.0 / b)
    inter_t, ex, ey = zero, zero, zero
    if inter:
        v, m = pooled_features(batch, image_level)
        inter_t, ex, ey = symmetric_info_nce(similarity_matrix(v, m, config, scale))
    total = intra_t + inter_t
    return LossReport(
        intra=float(intra_t.data),
        inter=float(inter_t.data),
        total=float(total.data),
        per_direction=(float(ix.data), float(iy.data), float(ex.data), float(ey.data)),
        tensor=total,
    )
