import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sctd import tensor as T
from sctd.errors import ContractError, DimensionError, GraphError, NumericError

from conftest import numeric_grad, rel_err

RNG = np.random.default_rng(1234)


def leaf(*shape, positive=False):
    x = RNG.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return T.Tensor(x, requires_grad=True)


def check_grads(fn, *inputs, tol=1e-6):
    """Analytic vs central-difference gradients of sum(fn(*inputs) * W)."""
    for x in inputs:
        x.grad = None
    out = fn(*inputs)
    w = RNG.standard_normal(out.shape)
    T.backward(T.sum(out * w))

    def scalar():
        with T.no_grad():
            return float((fn(*inputs).data * w).sum())

    for x in inputs:
        if isinstance(x, T.Tensor) and x.requires_grad:
            num = numeric_grad(scalar, x.data)
            assert rel_err(x.grad, num) < tol, fn


# -- forward oracles -----------------------------------------------------------


def test_gelu_matches_closed_form():
    x = np.linspace(-6, 6, 101)
    want = np.array([0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3))) for v in x])
    np.testing.assert_allclose(T.gelu(T.Tensor(x)).data, want, rtol=1e-13, atol=1e-15)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    x = RNG.standard_normal((4, 7)) * 30
    p = T.softmax(T.Tensor(x)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-14)
    np.testing.assert_allclose(T.softmax(T.Tensor(x + 1000.0)).data, p, atol=1e-14)


def test_softmax_known_value():
    p = T.softmax(T.Tensor(np.array([[0.0, math.log(3.0)]]))).data
    np.testing.assert_allclose(p, [[0.25, 0.75]], atol=1e-15)


def test_log_softmax_equals_log_of_softmax():
    x = RNG.standard_normal((5, 9))
    np.testing.assert_allclose(T.log_softmax(T.Tensor(x)).data, np.log(T.softmax(T.Tensor(x)).data), atol=1e-13)


def test_layer_norm_zero_mean_unit_variance():
    x = RNG.standard_normal((3, 5, 16)) * 4 + 2
    out = T.layer_norm(T.Tensor(x), T.Tensor(np.ones(16)), T.Tensor(np.zeros(16)), 1e-12).data
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(-1), 1.0, atol=1e-9)


def test_linear_matches_matmul_plus_bias():
    x, w, b = RNG.standard_normal((6, 4)), RNG.standard_normal((4, 3)), RNG.standard_normal(3)
    np.testing.assert_allclose(T.linear(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data, x @ w + b, atol=1e-14)


# -- gradient checks -----------------------------------------------------------


@pytest.mark.parametrize(
    "fn,shapes",
    [
        (lambda a, b: a + b, [(3, 4), (4,)]),
        (lambda a, b: a - b, [(3, 4), (3, 1)]),
        (lambda a, b: a * b, [(2, 3, 4), (3, 4)]),
        (lambda a: -a, [(5,)]),
        (lambda a: T.exp(a), [(3, 3)]),
        (lambda a: T.square(a), [(3, 3)]),
        (lambda a: T.gelu(a), [(4, 6)]),
        (lambda a: T.gelu(a), [(3, 20000 // 3 + 7)]),  # spans several internal blocks
        (lambda a, b: a @ b, [(3, 4), (4, 5)]),
        (lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
        (lambda a, b: a @ b, [(2, 2, 3, 4), (2, 2, 4, 3)]),
        (lambda a, w, b: T.linear(a, w, b), [(5, 4), (4, 3), (3,)]),
        (lambda a: T.sum(a, axis=1), [(3, 4, 2)]),
        (lambda a: T.mean(a, axis=-1, keepdims=True), [(3, 4)]),
        (lambda a: T.mean(a), [(3, 4)]),
        (lambda a: a.reshape(6, 2).transpose(1, 0), [(3, 4)]),
        (lambda a: T.softmax(a, axis=-1), [(3, 4, 5)]),
        (lambda a: T.softmax(a, axis=0), [(3, 4)]),
        (lambda a: T.log_softmax(a, axis=-1), [(4, 6)]),
        (lambda a, b: T.concat([a, b], axis=0), [(2, 3), (4, 3)]),
    ],
)
def test_gradcheck_basic(fn, shapes):
    check_grads(fn, *[leaf(*s) for s in shapes])


def test_gradcheck_div_log_clamp():
    a, b = leaf(3, 4), leaf(3, 4, positive=True)
    check_grads(lambda a, b: a / b, a, b)
    check_grads(lambda b: T.log(b), b)
    check_grads(lambda a: T.clamp_min(a, 0.3), leaf(5, 5))


def test_gradcheck_layer_norm():
    x, g, b = leaf(2, 3, 8), leaf(8), leaf(8)
    check_grads(lambda x, g, b: T.layer_norm(x, g, b, 1e-12), x, g, b)


def test_gradcheck_indexing_ops():
    w = leaf(10, 4)
    ids = np.array([[1, 3, 3], [0, 9, 1]])
    check_grads(lambda w: T.embedding(w, ids), w)
    check_grads(lambda w: T.index_select(w, np.array([2, 2, 5, 0])), leaf(6, 3))
    check_grads(lambda a: T.pick(a, np.array([0, 3, 1])), leaf(3, 4))
    check_grads(lambda a: a[1:, ::2], leaf(3, 4))


def test_gradcheck_batch_gather_and_scatter():
    base = leaf(2, 5, 3)
    index = np.array([[4, 0, 2], [1, 3, 0]])
    valid = np.array([[True, True, False], [True, False, False]])
    check_grads(lambda a: T.batch_gather(a, index), base)
    base2, src2 = leaf(2, 5, 3), leaf(2, 3, 3)
    check_grads(lambda b, s: T.scatter_rows(b, s, index, valid), base2, src2)


def test_scatter_rows_semantics():
    base = T.Tensor(np.zeros((1, 4, 1)))
    src = T.Tensor(np.array([[[7.0], [8.0]]]))
    out = T.scatter_rows(base, src, np.array([[2, 0]]), np.array([[True, False]])).data
    np.testing.assert_array_equal(out[0, :, 0], [0, 0, 7, 0])


def test_gradient_accumulates_over_shared_use():
    a = leaf(3)
    T.backward(T.sum(a * a + a))
    np.testing.assert_allclose(a.grad, 2 * a.data + 1, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5))
def test_matmul_grad_shapes_property(b, n, k):
    x = T.Tensor(RNG.standard_normal((b, n, k)), requires_grad=True)
    w = T.Tensor(RNG.standard_normal((k, 3)), requires_grad=True)
    T.backward(T.sum(x @ w))
    assert x.grad.shape == x.shape and w.grad.shape == w.shape
    np.testing.assert_allclose(w.grad, x.data.reshape(-1, k).sum(0)[:, None].repeat(3, 1), atol=1e-12)


# -- contracts ----------------------------------------------------------------


def test_double_backward_is_rejected():
    a = leaf(3)
    loss = T.sum(a * a)
    T.backward(loss)
    with pytest.raises(GraphError):
        T.backward(loss)


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        T.backward(leaf(3) * 2.0)


def test_no_grad_records_nothing():
    a = leaf(3)
    with T.no_grad():
        out = a * 2.0
    assert not out.requires_grad
    assert T.is_grad_enabled()


def test_overflow_raises_numeric_error():
    with pytest.raises(NumericError):
        T.exp(T.Tensor(np.array([1000.0])))


def test_log_of_zero_raises_numeric_error():
    with pytest.raises(NumericError):
        T.log(T.Tensor(np.array([0.0])))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        leaf(2, 3) @ leaf(4, 2)


def test_detach_cuts_the_graph():
    a = leaf(3)
    b = leaf(3)
    T.backward(T.sum(a.detach() * b))
    assert a.grad is None
    np.testing.assert_allclose(b.grad, a.data)
