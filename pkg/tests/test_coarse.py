import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kptrack import tensor as T
from kptrack.coarse import (Verdict, classify, classify_arrays, imbalance_ratio, similarity,
                            softmax_np)
from kptrack.features import patch_centers
from kptrack.model import ModelConfig, Tracker
from kptrack.tensor import ShapeError, Tensor


@pytest.fixture(scope="module")
def tiny_model():
    return Tracker(ModelConfig(dim=8, coarse_depth=1, fine_depth=1, pos_hidden=(8,), seed=3))


def test_similarity_hand_example():
    s = similarity(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]])).data
    np.testing.assert_allclose(s, [[1 / math.sqrt(2), 0.0]], atol=1e-7)


def test_similarity_identity_block_dominates():
    f = np.eye(4)
    s = similarity(Tensor(f), Tensor(np.vstack([f, np.zeros((1, 4))]))).data
    assert list(s.argmax(axis=1)) == [0, 1, 2, 3]


def test_similarity_bilinear(rng):
    f1, f2 = rng.normal(size=(3, 5)), rng.normal(size=(7, 5))
    a = similarity(Tensor(f1), Tensor(f2)).data
    f1[1] *= 2
    b = similarity(Tensor(f1), Tensor(f2)).data
    np.testing.assert_allclose(b[1], 2 * a[1], rtol=1e-5)
    np.testing.assert_allclose(b[[0, 2]], a[[0, 2]])


def test_similarity_dim_mismatch():
    with pytest.raises(ShapeError):
        similarity(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_classify_ocl_row():
    row = np.zeros((1, 65))
    row[0, -1] = 10
    assert classify(row)[0].verdict == Verdict.OCCLUDED


def test_ocl_beats_threshold():
    # OCL is the argmax but with low confidence: still OCCLUDED, not REJECTED
    row = np.zeros((1, 65))
    row[0, -1] = 0.5
    m = classify(row, threshold=0.5)[0]
    assert m.verdict == Verdict.OCCLUDED and m.confidence < 0.5


def test_threshold_zero_never_rejects(rng):
    s = rng.normal(size=(50, 17))
    assert all(m.verdict != Verdict.REJECTED for m in classify(s, 0.0))


def test_uniform_row_rejected():
    m = classify(np.zeros((1, 65)), threshold=0.1)[0]
    assert m.verdict == Verdict.REJECTED
    assert m.confidence == pytest.approx(1 / 65, abs=1e-4)


def test_threshold_range():
    with pytest.raises(ValueError):
        classify_arrays(np.zeros((1, 5)), 1.0)


def test_patch_center_consistency(rng):
    s = rng.normal(size=(40, 3 * 5 + 1)) * 5
    centers = patch_centers(3, 5)
    for m in classify(s, 0.0, grid_shape=(3, 5)):
        if m.verdict == Verdict.PATCH:
            assert m.center == tuple(centers[m.patch])
            r, c = divmod(m.patch, 5)
            assert m.center == (8 * c + 4, 8 * r + 4)


@given(st.floats(-50, 50), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=40, deadline=None)
def test_classify_shift_invariant(c, seed):
    s = np.random.default_rng(seed).normal(size=(6, 10))
    b0, p0, k0 = classify_arrays(s, 0.2)
    b1, p1, k1 = classify_arrays(s + c, 0.2)
    np.testing.assert_array_equal(b0, b1)
    np.testing.assert_array_equal(k0, k1)
    np.testing.assert_allclose(p0, p1, atol=1e-6)


def test_confidences_are_probabilities(rng):
    s = rng.normal(size=(20, 9)) * 30
    p = softmax_np(s)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)
    for m in classify(s, 0.2, grid_shape=(2, 4)):
        assert 0 <= m.confidence <= 1


@pytest.mark.parametrize("m, h, w, frac, want", [
    (512, 256, 256, 0.2, 0.4), (512, 256, 256, 1.0, 0.0), (0, 64, 64, 0.3, 0.0)])
def test_imbalance_ratio(m, h, w, frac, want):
    assert imbalance_ratio(m, h, w, frac) == pytest.approx(want)


def test_imbalance_ratio_zero_area():
    with pytest.raises(ValueError):
        imbalance_ratio(5, 0, 64, 0.1)


@pytest.mark.parametrize("trial", range(6))
def test_model_similarity_shape_and_rows(tiny_model, trial):
    rng = np.random.default_rng(trial)
    h, w = 8 * rng.integers(1, 6, size=2)
    m = int(rng.integers(1, 9))
    kps = rng.uniform([0, 0], [w, h], size=(1, m, 2))
    out = tiny_model.coarse(rng.uniform(size=(1, h, w)), rng.uniform(size=(1, h, w)), kps, [m])
    assert out.scores.shape == (1, m, h * w // 64 + 1)
    p = T.softmax_rows(out.scores).data
    np.testing.assert_allclose(p.sum(axis=-1), 1, atol=1e-6)
