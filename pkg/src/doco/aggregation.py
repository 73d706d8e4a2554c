"""ROI aggregation: pool patch features into one vector per document object.

A single shared CLS vector is prepended to the patch sequence and one
single-head attention pass is run per object, with the object's overlap mask
added to the CLS query's scores over the patch keys. Only the CLS output row
is kept, so only the CLS query row of the attention matrix is computed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoders import (
    DocObject,
    encode_multimodal,
    encode_visual,
    linear,
    project_multimodal,
)
from .errors import ConfigurationError, DimensionError
from .geometry import bias_rows, compute_overlap_masks, pad_to_bias
from .numerics import ParameterStore, Tensor


@dataclass
class AggregationConfig:
    mode: str = "roi"  # "roi" | "average"
    bias_scale: float = 1.0
    bias_mode: str = "additive"  # "additive" | "hard"

    def __post_init__(self):
        if self.mode not in ("roi", "average"):
            raise ConfigurationError(f"unknown aggregation mode {self.mode!r}")
        if self.bias_mode not in ("additive", "hard"):
            raise ConfigurationError(f"unknown bias mode {self.bias_mode!r}")


def init_roi(store: ParameterStore, dim: int, rng, std=None) -> None:
    s = std if std is not None else 1.0 / math.sqrt(dim)
    store.add("roi.cls", rng.normal(0.0, 0.02, dim))
    for name in ("q", "k", "v", "out"):
        store.add(f"roi.{name}.w", rng.normal(0.0, s, (dim, dim)))
        store.add(f"roi.{name}.b", np.zeros(dim))


def _check_masks(patches: Tensor, masks) -> np.ndarray:
    masks = np.atleast_2d(np.asarray(masks, dtype=np.float64))
    if masks.shape[0] < 1:
        raise DimensionError("at least one mask (the global object's) is required")
    if masks.shape[1] != patches.shape[-2]:
        raise DimensionError(
            f"mask length {masks.shape[1]} does not match patch count {patches.shape[-2]}"
        )
    return masks


def roi_aggregate(patches: Tensor, masks, params: ParameterStore, bias_scale: float = 1.0,
                  bias_mode: str = "additive", return_attention: bool = False):
    """One CLS-pooled feature per mask, shape ``(n_obj, d_v)``.

    ``patches`` is ``(H'W', d_v)``; ``masks`` is ``(n_obj, H'W')``. With
    ``return_attention`` the CLS attention rows ``(n_obj, H'W'+1)`` are also
    returned as a plain array.
    """
    patches = nx.as_tensor(patches)
    masks = _check_masks(patches, masks)
    d = patches.shape[-1]
    seq = nx.concat([params["roi.cls"].reshape(1, d), patches], axis=0)
    q0 = linear(seq[0:1], params, "roi.q")
    k = linear(seq, params, "roi.k")
    v = linear(seq, params, "roi.v")
    scores = nx.matmul(q0, k.T) * (1.0 / math.sqrt(d))
    bias = bias_rows(masks, bias_scale, bias_mode)
    scores = scores * np.ones((masks.shape[0], 1))
    att = nx.softmax_with_bias(scores, bias)
    out = linear(nx.matmul(att, v), params, "roi.out")
    if return_attention:
        return out, att.data
    return out


def roi_attention_full(patches, mask, params: ParameterStore, bias_scale: float = 1.0) -> np.ndarray:
    """Full ``(H'W'+1)^2`` attention output with the padded square bias.

    Reference path for tests: row 0 must equal the corresponding
    ``roi_aggregate`` row before the output projection.
    """
    p = nx.as_tensor(patches).data
    d = p.shape[-1]
    seq = np.concatenate([params["roi.cls"].data.reshape(1, d), p], axis=0)
    q = seq @ params["roi.q.w"].data + params["roi.q.b"].data
    k = seq @ params["roi.k.w"].data + params["roi.k.b"].data
    v = seq @ params["roi.v.w"].data + params["roi.v.b"].data
    att = nx.softmax_with_bias(q @ k.T / math.sqrt(d), bias_scale * pad_to_bias(mask)).data
    return att @ v


def average_aggregate(patches, masks) -> Tensor:
    """Mask-weighted mean of patch rows, normalised by the mask sum."""
    patches = nx.as_tensor(patches)
    masks = _check_masks(patches, masks)
    weights = masks / masks.sum(axis=1, keepdims=True)
    return nx.matmul(Tensor(weights), patches)


def aggregate(patches, masks, params: ParameterStore, config: AggregationConfig) -> Tensor:
    if config.mode == "average":
        return average_aggregate(patches, masks)
    return roi_aggregate(patches, masks, params, config.bias_scale, config.bias_mode)


def object_masks(objects: Sequence[DocObject], grid) -> np.ndarray:
    return compute_overlap_masks([o.bbox for o in objects], grid)


def aggregate_pair(image, objects: Sequence[DocObject], params: ParameterStore, model,
                   mm_features=None) -> tuple[Tensor, Tensor]:
    """Aggregated visual rows and projected multimodal rows, object-aligned.

    ``model`` is a :class:`doco.model.ModelConfig`. ``mm_features`` may carry
    precomputed (frozen) multimodal features to skip the backbone pass.
    """
    patches = encode_visual(image, model.vision, params)
    masks = object_masks(objects, model.vision.grid)
    visual = aggregate(patches, masks, params, model.aggregation)
    if mm_features is None:
        mm_features = encode_multimodal(image, objects, params, model.multimodal)
    return visual, project_multimodal(mm_features, params)
