import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from doco.errors import ConfigurationError, DimensionError
from doco.losses import (
    DoCoBatch,
    SimilarityConfig,
    doco_loss,
    inter_doco_loss,
    intra_doco_loss,
    logit_scale,
    similarity_matrix,
    symmetric_info_nce,
)
from doco.numerics import ParameterStore, Tensor, finite_diff_check

UNIT = SimilarityConfig(temperature=1.0, trainable_temperature=False)
# log(1 + e^-1), 40-digit mpmath evaluation
LOG1P_EXP_M1 = 0.3132616875182228340489954949678556419153


def test_similarity_identity():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(4, 4)))
    np.testing.assert_allclose(similarity_matrix(q, q, UNIT).data, np.eye(4), atol=1e-12)


def test_similarity_scale_invariance():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    scaled = a.copy()
    scaled[1] *= 5.0
    np.testing.assert_allclose(similarity_matrix(scaled, b, UNIT).data, similarity_matrix(a, b, UNIT).data,
                               atol=1e-12)


def test_similarity_matches_naive_oracle():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    cfg = SimilarityConfig(temperature=0.5, trainable_temperature=False)
    ref = np.empty((3, 2))
    for i in range(3):
        for j in range(2):
            dot = sum(a[i, k] * b[j, k] for k in range(4))
            na = math.sqrt(sum(x * x for x in a[i]))
            nb = math.sqrt(sum(x * x for x in b[j]))
            ref[i, j] = dot / (na * nb) / 0.5
    np.testing.assert_allclose(similarity_matrix(a, b, cfg).data, ref, atol=1e-12)


def test_similarity_width_mismatch():
    with pytest.raises(DimensionError):
        similarity_matrix(np.ones((2, 3)), np.ones((2, 4)))


def test_temperature_bounds():
    with pytest.raises(ConfigurationError):
        SimilarityConfig(temperature=1e-4)
    store = ParameterStore()
    store.add("temp.log_tau", np.array(math.log(1e-6)))
    assert math.isclose(float(logit_scale(SimilarityConfig(), store).data), 1e3, rel_tol=1e-12)


def test_intra_single_object_is_zero():
    assert intra_doco_loss(np.ones((1, 3)), np.ones((1, 3)) * 2, UNIT).data == 0.0


def test_intra_identity_closed_form():
    eye = np.eye(2)
    assert abs(float(intra_doco_loss(eye, eye, UNIT).data) - LOG1P_EXP_M1) < 1e-12


def test_intra_joint_permutation_invariance():
    rng = np.random.default_rng(3)
    v, m = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    perm = rng.permutation(5)
    a = float(intra_doco_loss(v, m).data)
    b = float(intra_doco_loss(v[perm], m[perm]).data)
    assert abs(a - b) < 1e-12


def test_inter_closed_forms():
    one = DoCoBatch([(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 2))))])
    assert inter_doco_loss(one, UNIT).data == 0.0
    two = DoCoBatch([
        (Tensor([[1.0, 0.0], [1.0, 0.0]]), Tensor([[1.0, 0.0]] * 2)),
        (Tensor([[0.0, 1.0]] * 3), Tensor([[0.0, 1.0]] * 3)),
    ])
    assert abs(float(inter_doco_loss(two, UNIT).data) - LOG1P_EXP_M1) < 1e-12


def test_inter_duplicated_image_is_log2():
    rng = np.random.default_rng(4)
    pair = (Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4))))
    loss = float(inter_doco_loss(DoCoBatch([pair, pair]), SimilarityConfig(trainable_temperature=False)).data)
    assert abs(loss - math.log(2)) < 1e-12


def test_doco_loss_trivial_and_sum():
    single = DoCoBatch([(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))))])
    assert doco_loss(single, UNIT).total == 0.0
    rng = np.random.default_rng(5)
    batch = DoCoBatch([(Tensor(rng.normal(size=(n, 4))), Tensor(rng.normal(size=(n, 4)))) for n in (2, 4, 3)])
    rep = doco_loss(batch, SimilarityConfig(trainable_temperature=False))
    assert abs(rep.total - (rep.intra + rep.inter)) < 1e-12
    assert all(x >= 0 for x in rep.per_direction)
    assert rep.tensor is not None


def test_disabled_terms_are_zero():
    rng = np.random.default_rng(6)
    batch = DoCoBatch([(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))) for _ in range(2)])
    assert doco_loss(batch, UNIT, intra=False).intra == 0.0
    assert doco_loss(batch, UNIT, inter=False).inter == 0.0


square = st.integers(1, 6).flatmap(
    lambda n: hnp.arrays(np.float64, (n, n), elements=st.floats(-5, 5))
)


@given(square)
def test_info_nce_non_negative(s):
    loss, lx, ly = symmetric_info_nce(Tensor(s))
    assert float(lx.data) >= 0 and float(ly.data) >= 0
    if s.shape[0] == 1:
        assert float(loss.data) == 0.0


@given(square)
def test_transpose_swaps_directions(s):
    _, lx, ly = symmetric_info_nce(Tensor(s))
    _, tx, ty = symmetric_info_nce(Tensor(s.T))
    assert abs(float(lx.data) - float(ty.data)) < 1e-12
    assert abs(float(ly.data) - float(tx.data)) < 1e-12


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_row_scale_invariance(seed, factor):
    rng = np.random.default_rng(seed)
    v, m = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    row = rng.integers(4)
    v2 = v.copy()
    v2[row] *= factor
    a = float(intra_doco_loss(v, m, SimilarityConfig(trainable_temperature=False)).data)
    b = float(intra_doco_loss(v2, m, SimilarityConfig(trainable_temperature=False)).data)
    assert abs(a - b) < 1e-12


def test_margin_monotonicity_and_lower_bound():
    off = np.random.default_rng(7).uniform(-1, 1, (3, 3))
    np.fill_diagonal(off, 0.0)
    losses = []
    for c in (0.0, 0.5, 1.0, 2.0, 5.0, 50.0):
        s = off + c * np.eye(3)
        losses.append(float(symmetric_info_nce(Tensor(s))[0].data))
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-12


def test_image_level_baseline_differs():
    rng = np.random.default_rng(8)
    batch = DoCoBatch([(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))) for _ in range(3)],
                      global_rows=[2, 2, 2])
    cfg = SimilarityConfig(trainable_temperature=False)
    full = doco_loss(batch, cfg).total
    baseline = doco_loss(batch, cfg, intra=False, image_level=True).total
    assert abs(full - baseline) > 1e-6


def test_loss_gradient_through_features():
    rng = np.random.default_rng(9)
    store = ParameterStore()
    for i in range(2):
        store.add(f"v{i}", rng.normal(size=(3, 4)))
        store.add(f"m{i}", rng.normal(size=(3, 4)))
    store.add("temp.log_tau", np.array(math.log(0.2)))
    cfg = SimilarityConfig(temperature=0.2)

    def loss(s):
        batch = DoCoBatch([(s[f"v{i}"], s[f"m{i}"]) for i in range(2)])
        return doco_loss(batch, cfg, s).tensor

    assert finite_diff_check(loss, store, n_samples=40) < 1e-4
