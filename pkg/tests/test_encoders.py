import numpy as np
import pytest

from doco.encoders import (
    DocObject,
    MultimodalConfig,
    VisionEncoderConfig,
    encode_multimodal,
    encode_visual,
    init_multimodal,
    init_vision,
    project_multimodal,
    quantize_layout,
    tokenize,
)
from doco.errors import AnnotationError, ConfigurationError, IngestionError
from doco.geometry import BBox
from doco.model import ModelConfig, build_store
from doco.numerics import ParameterStore, finite_diff_check

IMG64 = np.zeros((64, 64, 1))


def test_default_vision_shape():
    model = ModelConfig()
    store = build_store(model)
    image = np.random.default_rng(0).random((64, 64, 1))
    out = encode_visual(image, model.vision, store)
    assert out.shape == (64, model.vision.dim)
    assert np.all(np.isfinite(out.data))


def test_vision_deterministic(model, store, rng):
    image = rng.random((16, 16, 1))
    a = encode_visual(image, model.vision, store).data
    b = encode_visual(image.copy(), model.vision, store).data
    assert a.tobytes() == b.tobytes()


def test_vision_batch_matches_single(model, store, rng):
    images = rng.random((3, 16, 16, 1))
    batch = encode_visual(images, model.vision, store).data
    for i in range(3):
        np.testing.assert_allclose(batch[i], encode_visual(images[i], model.vision, store).data, atol=1e-13)


def test_vision_config_errors():
    with pytest.raises(ConfigurationError):
        VisionEncoderConfig(image_size=60, patch_size=8)
    with pytest.raises(ConfigurationError):
        VisionEncoderConfig(dim=30, heads=4)


def _swap_patches(image, i, j, p, cols):
    out = image.copy()
    (ri, ci), (rj, cj) = divmod(i, cols), divmod(j, cols)
    a = image[ri * p:(ri + 1) * p, ci * p:(ci + 1) * p].copy()
    out[ri * p:(ri + 1) * p, ci * p:(ci + 1) * p] = image[rj * p:(rj + 1) * p, cj * p:(cj + 1) * p]
    out[rj * p:(rj + 1) * p, cj * p:(cj + 1) * p] = a
    return out


def test_patch_permutation_equivariance_without_positions(rng):
    cfg = VisionEncoderConfig(image_size=32, patch_size=8, dim=16, layers=2, heads=4)
    store = ParameterStore()
    init_vision(store, cfg, rng)
    store["vision.pos"].data[:] = 0.0
    image = rng.random((32, 32, 1))
    swapped = _swap_patches(image, 1, 14, 8, 4)
    a = encode_visual(image, cfg, store).data
    b = encode_visual(swapped, cfg, store).data
    perm = np.arange(16)
    perm[[1, 14]] = perm[[14, 1]]
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_perturbing_a_patch_changes_its_row_and_others(model, store, rng):
    image = rng.random((16, 16, 1))
    base = encode_visual(image, model.vision, store).data
    bumped = image.copy()
    bumped[8:16, 0:8] += 0.5
    out = encode_visual(bumped, model.vision, store).data
    assert np.abs(out[2] - base[2]).max() > 1e-6
    assert np.abs(np.delete(out, 2, axis=0) - np.delete(base, 2, axis=0)).max() > 0


def test_outputs_finite_with_small_init(rng):
    vcfg = VisionEncoderConfig(init_std=0.02)
    mcfg = MultimodalConfig(init_std=0.02, embed_std=0.02)
    store = ParameterStore()
    init_vision(store, vcfg, rng)
    init_multimodal(store, mcfg)
    image = rng.random((64, 64, 1))
    assert np.all(np.isfinite(encode_visual(image, vcfg, store).data))
    objs = [DocObject(BBox(0, 0, 10, 10), tokenize("AB")), DocObject(BBox(0, 0, 64, 64), tokenize("AB"), True)]
    assert np.all(np.isfinite(encode_multimodal(image, objs, store, mcfg).data))


# multimodal -------------------------------------------------------------------

def _objects(*specs):
    objs = [DocObject(BBox(*box), tokenize(text), False, text) for box, text in specs]
    return objs + [DocObject(BBox(0, 0, 64, 64), tokenize(" ".join(t for _, t in specs)), True)]


def test_multimodal_rows_are_n_plus_one():
    model = ModelConfig()
    store = build_store(model)
    objs = _objects(((0, 0, 10, 8), "AB"), ((20, 20, 40, 28), "CD"), ((5, 40, 30, 50), "EF"))
    out = encode_multimodal(IMG64, objs, store, model.multimodal)
    assert out.shape == (4, model.multimodal.dim)
    assert not out.requires_grad


def test_identical_objects_identical_rows():
    model = ModelConfig()
    store = build_store(model)
    objs = _objects(((0, 0, 10, 8), "AB"), ((0, 0, 10, 8), "AB"))
    out = encode_multimodal(IMG64, objs, store, model.multimodal).data
    np.testing.assert_array_equal(out[0], out[1])


def test_layout_sensitivity():
    model = ModelConfig()
    store = build_store(model)
    objs = _objects(((0, 0, 10, 8), "AB"), ((30, 40, 40, 48), "AB"))
    out = encode_multimodal(IMG64, objs, store, model.multimodal).data
    assert np.linalg.norm(out[0] - out[1]) > 1e-6


def test_global_without_tokens_pools_patches():
    model = ModelConfig()
    store = build_store(model)
    objs = [DocObject(BBox(0, 0, 64, 64), (), True)]
    out = encode_multimodal(IMG64, objs, store, model.multimodal).data
    assert out.shape == (1, model.multimodal.dim) and np.all(np.isfinite(out))


def test_multimodal_annotation_errors():
    model = ModelConfig()
    store = build_store(model)
    no_global = [DocObject(BBox(0, 0, 8, 8), (65,))]
    with pytest.raises(AnnotationError):
        encode_multimodal(IMG64, no_global, store, model.multimodal)
    two = no_global + [DocObject(BBox(0, 0, 64, 64), (), True)] * 2
    with pytest.raises(AnnotationError):
        encode_multimodal(IMG64, two, store, model.multimodal)
    bad_token = [DocObject(BBox(0, 0, 8, 8), (300,)), DocObject(BBox(0, 0, 64, 64), (), True)]
    with pytest.raises(IngestionError):
        encode_multimodal(IMG64, bad_token, store, model.multimodal)


def test_multimodal_backbone_is_frozen():
    store = build_store(ModelConfig())
    assert store.names(prefix="mm.")
    assert not any(store[n].requires_grad for n in store.names(prefix="mm."))


def test_quantize_layout():
    assert quantize_layout(BBox(0, 0, 64, 64), IMG64, 16) == (0, 0, 15, 15)
    assert quantize_layout(BBox(32, 32, 48, 40), IMG64, 16)[:2] == (8, 8)
    assert quantize_layout(BBox(3, 50, 40, 60), IMG64, 1) == (0, 0, 0, 0)


def test_tokenize_is_byte_level_and_truncated():
    assert tokenize("AB") == (65, 66)
    assert len(tokenize("X" * 100, 32)) == 32


# projection -------------------------------------------------------------------

def test_projection_shapes_and_zero(model, store, rng):
    feats = rng.normal(size=(5, model.multimodal.dim))
    assert project_multimodal(feats, store).shape == (5, model.vision.dim)
    for n in store.names(prefix="proj."):
        store[n].data[...] = 0.0
    np.testing.assert_array_equal(project_multimodal(feats, store).data, 0.0)


def test_projection_gradient(model, store, rng):
    feats = rng.normal(size=(4, model.multimodal.dim))
    w = rng.normal(size=(4, model.vision.dim))
    err = finite_diff_check(lambda s: (project_multimodal(feats, s) * w).sum(), store,
                            names=store.names(prefix="proj."), n_samples=60)
    assert err < 1e-4
