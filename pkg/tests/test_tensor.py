import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kptrack import tensor as T
from kptrack.tensor import ShapeError, Tensor

import gradcheck


def test_default_dtype_is_float32():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with T.float64_mode():
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_matmul_identity():
    b = np.arange(6, dtype=np.float32).reshape(3, 2)
    out = T.matmul(Tensor(np.eye(3)), Tensor(b))
    np.testing.assert_array_equal(out.data, b)


def test_matmul_hand_example():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [1]]))
    np.testing.assert_array_equal(out.data, [[2], [4]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_grad(rng):
    a, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))
    assert gradcheck.check(lambda x, y: T.sum_all(T.matmul(x, y)), a, b) < 1e-3


def test_batched_matmul_grad(rng):
    a, b = rng.uniform(-1, 1, (2, 3, 4)), rng.uniform(-1, 1, (2, 4, 2))
    w = rng.uniform(-1, 1, (2, 3, 2))
    f = lambda x, y: T.sum_all(T.mul(T.matmul(x, y), Tensor(w)))
    assert gradcheck.check(f, a, b) < 1e-3


def test_softmax_uniform_row():
    out = T.softmax_rows(Tensor(np.full((1, 5), 3.0)))
    np.testing.assert_allclose(out.data, 0.2, atol=1e-7)


def test_softmax_closed_form():
    out = T.softmax_rows(Tensor([[0.0, math.log(3.0)]]))
    np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-7)


@given(arrays(np.float64, (3, 7), elements=st.floats(-500, 500)), st.floats(-100, 100))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_normalized_and_shift_invariant(x, c):
    p = T.softmax_rows(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    q = T.softmax_rows(Tensor(x + c)).data
    np.testing.assert_allclose(p, q, atol=1e-6)


def test_softmax_large_spread():
    x = np.array([[0.0, 1000.0, -1000.0, 3.0]])
    p = T.softmax_rows(Tensor(x)).data
    assert abs(p.sum() - 1) <= 1e-6


def test_softmax_grad(rng):
    x = rng.uniform(-1, 1, (3, 5))
    w = rng.uniform(-1, 1, (3, 5))
    assert gradcheck.check(lambda t: T.sum_all(T.mul(T.softmax_rows(t), Tensor(w))), x) < 1e-3


@pytest.mark.parametrize("x, want", [(0.0, 1.0), (3.0, 4.0), (-1.0, math.exp(-1))])
def test_elu_plus_one_values(x, want):
    with T.float64_mode():
        out = T.elu_plus_one(Tensor([x]))
    assert out.data[0] == pytest.approx(want, rel=1e-12)


@given(arrays(np.float64, 20, elements=st.floats(-80, 80)))
@settings(max_examples=50, deadline=None)
def test_elu_plus_one_positive(x):
    with T.float64_mode():
        assert np.all(T.elu_plus_one(Tensor(x)).data > 0)


@pytest.mark.parametrize("name, op", [
    ("relu", T.relu), ("tanh", T.tanh), ("square", T.square), ("elu", T.elu_plus_one),
    ("transpose", T.transpose),
])
def test_unary_grads(rng, name, op):
    x = rng.uniform(-1, 1, (3, 4))
    if name == "relu":
        x[np.abs(x) < 0.05] = 0.3  # keep away from the kink
    w = rng.uniform(-1, 1, op(Tensor(x)).shape)
    assert gradcheck.check(lambda t: T.sum_all(T.mul(op(t), Tensor(w))), x) < 1e-3


def test_binary_grads(rng):
    a, b = rng.uniform(-1, 1, (2, 3)), rng.uniform(-1, 1, (2, 3))
    assert gradcheck.check(lambda x, y: T.sum_all(T.mul(T.sub(x, y), T.add(x, y))), a, b) < 1e-3


def test_shape_op_grads(rng):
    x = rng.uniform(-1, 1, (2, 3, 4))
    w = rng.uniform(-1, 1, (2, 3, 5))

    def f(t):
        left = T.slice_last(t, 0, 2)
        right = T.slice_last(t, 1, 4)
        y = T.concat_last([left, right])
        return T.sum_all(T.mul(y, Tensor(w)))

    assert gradcheck.check(f, x) < 1e-3

    w2 = rng.uniform(-1, 1, (3, 4, 4))

    def g(t):
        y = T.concat_rows([T.reshape(t, (3, 2, 4)), T.slice_first(T.reshape(t, (3, 2, 4)), 0, 3)])
        return T.sum_all(T.mul(y, Tensor(w2)))

    assert gradcheck.check(g, x) < 1e-3


def test_linear_and_bias_grads(rng):
    x, w, b = rng.uniform(-1, 1, (2, 3, 4)), rng.uniform(-1, 1, (4, 5)), rng.uniform(-1, 1, 5)
    c = rng.uniform(-1, 1, (2, 3, 5))
    f = lambda x_, w_, b_: T.sum_all(T.mul(T.linear(x_, w_, b_), Tensor(c)))
    assert gradcheck.check(f, x, w, b) < 1e-3


def test_gather_rows_grad(rng):
    x = rng.uniform(-1, 1, (5, 3))
    idx = np.array([[0, 1], [4, 4], [2, 0]])
    wts = rng.uniform(0, 1, idx.shape)
    c = rng.uniform(-1, 1, (3, 3))
    f = lambda t: T.sum_all(T.mul(T.gather_rows(t, idx, wts), Tensor(c)))
    assert gradcheck.check(f, x) < 1e-3


def test_layer_norm_grad(rng):
    x, g, b = rng.uniform(-1, 1, (3, 6)), rng.uniform(0.5, 1.5, 6), rng.uniform(-1, 1, 6)
    c = rng.uniform(-1, 1, (3, 6))
    f = lambda x_, g_, b_: T.sum_all(T.mul(T.layer_norm(x_, g_, b_), Tensor(c)))
    assert gradcheck.check(f, x, g, b) < 1e-3


def test_layer_norm_output_moments(rng):
    x = Tensor(rng.normal(3, 2, (4, 16)))
    out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-5)
    np.testing.assert_allclose(out.std(axis=1), 1, atol=1e-3)


def test_cross_entropy_grad_and_ignore(rng):
    logits = rng.uniform(-1, 1, (4, 6))
    targets = np.array([2, -1, 5, 0])
    assert gradcheck.check(lambda t: T.cross_entropy(t, targets), logits) < 1e-3
    with T.float64_mode():
        lt = Tensor(logits, requires_grad=True)
        T.cross_entropy(lt, targets).backward()
    np.testing.assert_array_equal(lt.grad[1], 0)


def test_cross_entropy_uniform_is_log_c():
    with T.float64_mode():
        loss = T.cross_entropy(Tensor(np.zeros((3, 65))), np.array([0, 10, 64]))
    assert float(loss.data) == pytest.approx(math.log(65), abs=1e-12)


def test_cross_entropy_confident_goes_to_zero():
    logits = np.zeros((1, 4))
    logits[0, 2] = 60.0
    with T.float64_mode():
        assert float(T.cross_entropy(Tensor(logits), np.array([2])).data) < 1e-20


def test_cross_entropy_errors():
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([-1, -1]))
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.scale(x, 2.0).backward()


def test_backward_accumulates_across_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.sum_all(T.square(x)).backward()
    T.sum_all(T.square(x)).backward()
    np.testing.assert_allclose(x.grad, 2 * 2 * x.data)


def test_diamond_graph_sums_both_paths():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = T.scale(x, 2.0)           # shared subexpression
    z = T.add(T.square(y), T.scale(y, 5.0))
    T.sum_all(z).backward()
    # dz/dx = (2y + 5) * 2 with y = 6
    np.testing.assert_allclose(x.grad, [34.0])


def test_deep_chain_does_not_recurse():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = T.scale(y, 1.0)
    T.sum_all(y).backward()
    np.testing.assert_allclose(x.grad, [1.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.square(x)
    assert not y.requires_grad and y._parents == ()


def test_exact_shape_rule():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        T.add_bias(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))
