"""Toy vision transformer, frozen layout-aware multimodal encoder, projection MLP.

Parameter names are prefixed per branch: ``vision.*`` (trainable),
``mm.*`` (frozen multimodal backbone) and ``proj.*`` (trainable projection
from the multimodal width to the vision width).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import AnnotationError, ConfigurationError, IngestionError
from .geometry import BBox, PatchGrid
from .numerics import ParameterStore, Tensor


@dataclass
class VisionEncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 32
    layers: int = 2
    heads: int = 4
    channels: int = 1
    mlp_ratio: int = 4
    init_std: float | None = None  # None: 1/sqrt(fan_in)

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"patch size {self.patch_size} does not divide image size {self.image_size}"
            )
        if self.dim % self.heads:
            raise ConfigurationError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.image_size, self.image_size, self.patch_size)


@dataclass
class MultimodalConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 48
    layers: int = 2
    heads: int = 4
    channels: int = 1
    vocab_size: int = 256
    max_tokens: int = 32
    layout_bins: int = 16
    mlp_ratio: int = 4
    init_std: float | None = None
    embed_std: float = 1.0
    seed: int = 1234

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError("multimodal patch size must divide image size")
        if self.dim % self.heads:
            raise ConfigurationError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.image_size, self.image_size, self.patch_size)


@dataclass(frozen=True)
class DocObject:
    bbox: BBox
    token_ids: tuple[int, ...] = ()
    is_global: bool = False
    text: str = field(default="", compare=False)


def tokenize(text: str, max_tokens: int = 32) -> tuple[int, ...]:
    """Byte-level tokens of ``text``, truncated to ``max_tokens``."""
    return tuple(text.encode("utf-8")[:max_tokens])


# parameter initialisation -------------------------------------------------

def _linear_init(store, name, fan_in, fan_out, rng, std, trainable=True):
    s = std if std is not None else 1.0 / math.sqrt(fan_in)
    store.add(f"{name}.w", rng.normal(0.0, s, (fan_in, fan_out)), trainable)
    store.add(f"{name}.b", np.zeros(fan_out), trainable)


def _block_init(store, prefix, dim, mlp_ratio, rng, std, trainable=True):
    for ln in ("ln1", "ln2"):
        store.add(f"{prefix}.{ln}.g", np.ones(dim), trainable)
        store.add(f"{prefix}.{ln}.b", np.zeros(dim), trainable)
    _linear_init(store, f"{prefix}.qkv", dim, 3 * dim, rng, std, trainable)
    _linear_init(store, f"{prefix}.out", dim, dim, rng, std, trainable)
    _linear_init(store, f"{prefix}.fc1", dim, mlp_ratio * dim, rng, std, trainable)
    _linear_init(store, f"{prefix}.fc2", mlp_ratio * dim, dim, rng, std, trainable)


def init_vision(store: ParameterStore, config: VisionEncoderConfig, rng) -> None:
    d = config.dim
    patch_dim = config.patch_size**2 * config.channels
    _linear_init(store, "vision.patch", patch_dim, d, rng, config.init_std)
    store.add("vision.pos", rng.normal(0.0, 0.02, (config.grid.num_patches, d)))
    for i in range(config.layers):
        _block_init(store, f"vision.block{i}", d, config.mlp_ratio, rng, config.init_std)
    store.add("vision.ln_f.g", np.ones(d))
    store.add("vision.ln_f.b", np.zeros(d))


def init_multimodal(store: ParameterStore, config: MultimodalConfig) -> None:
    """Randomly initialised, frozen backbone drawn from its own fixed seed."""
    rng = np.random.default_rng(config.seed)
    d = config.dim
    std, es = config.init_std, config.embed_std
    frozen = False
    store.add("mm.word", rng.normal(0.0, es, (config.vocab_size, d)), frozen)
    store.add("mm.tok_pos", rng.normal(0.0, es, (config.max_tokens, d)), frozen)
    store.add("mm.patch_pos", rng.normal(0.0, es, (config.grid.num_patches, d)), frozen)
    for side in ("x1", "y1", "x2", "y2"):
        store.add(f"mm.layout.{side}", rng.normal(0.0, es, (config.layout_bins, d)), frozen)
    _linear_init(store, "mm.patch", config.patch_size**2 * config.channels, d, rng, std, frozen)
    for i in range(config.layers):
        _block_init(store, f"mm.block{i}", d, config.mlp_ratio, rng, std, frozen)
    store.add("mm.ln_f.g", np.ones(d), frozen)
    store.add("mm.ln_f.b", np.zeros(d), frozen)


def init_projection(store: ParameterStore, d_m: int, d_v: int, rng, std=None) -> None:
    _linear_init(store, "proj.fc1", d_m, d_v, rng, std)
    _linear_init(store, "proj.fc2", d_v, d_v, rng, std)


# shared layers --------------------------------------------------------------

def linear(x, params: ParameterStore, name: str) -> Tensor:
    return nx.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def self_attention(x: Tensor, params, prefix: str, heads: int, key_bias=None) -> Tensor:
    """Multi-head self attention over ``x`` of shape (B, T, d).

    ``key_bias`` (B, T) is added to every query's scores for the given key.
    """
    b, t, d = x.shape
    dh = d // heads
    qkv = linear(x, params, f"{prefix}.qkv")
    qkv = nx.transpose(qkv.reshape(b, t, 3, heads, dh), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = nx.matmul(q, nx.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    bias = None
    if key_bias is not None:
        bias = np.broadcast_to(np.asarray(key_bias)[:, None, None, :], scores.shape)
    att = nx.softmax_with_bias(scores, bias)
    out = nx.matmul(att, v)
    out = nx.transpose(out, (0, 2, 1, 3)).reshape(b, t, d)
    return linear(out, params, f"{prefix}.out")


def transformer_block(x, params, prefix, heads, key_bias=None) -> Tensor:
    h = nx.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = x + self_attention(h, params, prefix, heads, key_bias)
    h = nx.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = linear(nx.gelu(linear(h, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")
    return x + h


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) -> (B, H'W', P*P*C), patches in row-major order."""
    b, h, w, c = images.shape
    p = patch_size
    x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def _as_batch(image, size: int, channels: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(image, dtype=np.float64)
    single = arr.ndim == 3
    if arr.ndim == 2:
        arr, single = arr[:, :, None], True
    if single:
        arr = arr[None]
    if arr.shape[1] != size or arr.shape[2] != size:
        raise ConfigurationError(f"image is {arr.shape[1]}x{arr.shape[2]}, encoder expects {size}x{size}")
    if arr.shape[3] != channels:
        if channels == 1:
            arr = arr.mean(axis=3, keepdims=True)
        elif arr.shape[3] == 1:
            arr = np.repeat(arr, channels, axis=3)
        else:
            raise ConfigurationError(f"cannot map {arr.shape[3]} channels to {channels}")
    return arr, single


# vision -----------------------------------------------------------------------

def encode_visual(image, config: VisionEncoderConfig, params: ParameterStore) -> Tensor:
    """Patch features, one row per grid patch in row-major order.

    Accepts one image (H, W, C) -> (H'W', d_v) or a batch (B, H, W, C) ->
    (B, H'W', d_v).
    """
    images, single = _as_batch(image, config.image_size, config.channels)
    x = linear(patchify(images, config.patch_size), params, "vision.patch") + params["vision.pos"]
    for i in range(config.layers):
        x = transformer_block(x, params, f"vision.block{i}", config.heads)
    x = nx.layer_norm(x, params["vision.ln_f.g"], params["vision.ln_f.b"])
    return x[0] if single else x


# multimodal -------------------------------------------------------------------

def quantize_layout(box: BBox, image_shape, bins: int) -> tuple[int, int, int, int]:
    """Bin indices (x1, y1, x2, y2) of ``box`` on a ``bins``-level grid."""
    shape = getattr(image_shape, "shape", image_shape)
    height, width = shape[0], shape[1]
    idx = []
    for v, extent in ((box.x1, width), (box.y1, height), (box.x2, width), (box.y2, height)):
        idx.append(int(min(max(math.floor(v / extent * bins), 0), bins - 1)))
    return tuple(idx)


def _layout_embedding(params, boxes: Sequence[BBox], image_shape, bins: int) -> np.ndarray:
    idx = np.array([quantize_layout(b, image_shape, bins) for b in boxes], dtype=np.int64)
    return sum(params[f"mm.layout.{s}"].data[idx[:, j]] for j, s in enumerate(("x1", "y1", "x2", "y2")))


def check_objects(objects: Sequence[DocObject], vocab_size: int) -> None:
    n_global = sum(o.is_global for o in objects)
    if n_global != 1:
        raise AnnotationError(f"expected exactly one global object, found {n_global}")
    for i, o in enumerate(objects):
        if not o.is_global and not o.token_ids:
            raise AnnotationError(f"object {i} has no tokens")
        if any(t < 0 or t >= vocab_size for t in o.token_ids):
            raise IngestionError(f"object {i} has a token id outside vocabulary of size {vocab_size}")


def encode_multimodal(image, objects: Sequence[DocObject], params: ParameterStore,
                      config: MultimodalConfig) -> Tensor:
    """Fused text + layout + image features, one row per object.

    Each object's sequence is its token embeddings (with 1-D positions and its
    box's 2-D layout embedding) followed by the image patch embeddings (with
    their own 1-D positions and patch-box layouts). All objects run as one
    batch; a row is the mean over that object's token positions, or over the
    patch positions when it has no tokens. Runs without recording gradients.
    """
    check_objects(objects, config.vocab_size)
    images, _ = _as_batch(image, config.image_size, config.channels)
    image_shape = images.shape[1:3]
    grid = config.grid
    n = len(objects)
    lengths = [min(len(o.token_ids), config.max_tokens) for o in objects]
    seq_len = max(max(lengths), 1)
    d = config.dim

    with nx.no_grad():
        patch_part = linear(patchify(images, config.patch_size)[0], params, "mm.patch").data
        patch_part = patch_part + params["mm.patch_pos"].data
        patch_part = patch_part + _layout_embedding(params, grid.patch_boxes, image_shape, config.layout_bins)

        ids = np.zeros((n, seq_len), dtype=np.int64)
        valid = np.zeros((n, seq_len), dtype=bool)
        for i, o in enumerate(objects):
            ids[i, : lengths[i]] = o.token_ids[: lengths[i]]
            valid[i, : lengths[i]] = True
        tok = params["mm.word"].data[ids] + params["mm.tok_pos"].data[:seq_len]
        tok = tok + _layout_embedding(params, [o.bbox for o in objects], image_shape, config.layout_bins)[:, None, :]

        x = np.concatenate([tok, np.broadcast_to(patch_part, (n,) + patch_part.shape)], axis=1)
        key_valid = np.concatenate([valid, np.ones((n, grid.num_patches), dtype=bool)], axis=1)
        key_bias = np.where(key_valid, 0.0, -1e9)
        h = Tensor(x)
        for i in range(config.layers):
            h = transformer_block(h, params, f"mm.block{i}", config.heads, key_bias)
        h = nx.layer_norm(h, params["mm.ln_f.g"], params["mm.ln_f.b"]).data

        weights = np.zeros((n, x.shape[1]))
        for i in range(n):
            if lengths[i]:
                weights[i, : lengths[i]] = 1.0 / lengths[i]
            else:
                weights[i, seq_len:] = 1.0 / grid.num_patches
        pooled = np.einsum("nt,ntd->nd", weights, h)
    assert pooled.shape == (n, d)
    return Tensor(pooled)


def project_multimodal(features, params: ParameterStore) -> Tensor:
    """Two-layer GELU MLP from the multimodal width to the vision width."""
    h = nx.gelu(linear(nx.as_tensor(features), params, "proj.fc1"))
    return linear(h, params, "proj.fc2")
