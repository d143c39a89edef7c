import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sar2opt import tensor as T
from sar2opt.tensor import ContractError, DimensionError, Node, backward, grad_check


def leaf(v):
    return Node(v, requires_grad=True)


def test_add_values():
    assert T.add(Node([1, 2]), Node([3, 4])).value.tolist() == [4, 6]


def test_mul_by_ones_is_identity(rng):
    x = rng.normal(size=(3, 4))
    out = T.mul(Node(x), Node(np.ones_like(x)))
    np.testing.assert_array_equal(out.value, x.astype(np.float32))


def test_sub_self_and_its_gradient():
    x = leaf([1.0, -2.0, 3.0])
    y = T.sub(x, x)
    assert not y.value.any()
    backward(T.sum_(y))
    assert not x.grad.any()


def test_broadcast_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4,\)"):
        T.add(Node(np.zeros((2, 3))), Node(np.zeros(4)))


def test_trailing_singleton_broadcast_gradient():
    a = leaf(np.ones((2, 3)))
    b = leaf(np.ones((2, 1)))
    backward(T.sum_(a * b))
    assert b.grad.shape == (2, 1)
    assert b.grad.ravel().tolist() == [3, 3]


def test_reductions():
    assert T.mean(Node([2, 4])).item() == 3
    assert T.sum_(Node(np.zeros(5))).item() == 0
    m = T.mean(Node(np.arange(6).reshape(2, 3)), axis=1)
    assert m.value.tolist() == [1, 4]


def test_reduce_axis_out_of_range():
    with pytest.raises(DimensionError):
        T.sum_(Node(np.zeros((2, 2))), axis=2)


def test_mean_gradient_is_uniform():
    x = leaf(np.arange(4.0))
    backward(T.mean(x))
    assert x.grad.tolist() == [0.25] * 4


def test_matmul_examples():
    m = np.arange(4.0).reshape(2, 2)
    np.testing.assert_array_equal(T.matmul(Node(np.eye(2)), Node(m)).value, m)
    assert T.matmul(Node([[1, 2]]), Node([[3], [4]])).value.tolist() == [[11]]
    with pytest.raises(DimensionError):
        T.matmul(Node(np.zeros((2, 3))), Node(np.zeros((2, 3))))


def test_matmul_gradient_against_finite_difference(rng):
    b = rng.normal(size=(3, 2))
    a = rng.normal(size=(4, 3))
    an = leaf(a)
    backward(T.sum_(T.matmul(an, Node(b))))
    np.testing.assert_allclose(an.grad, np.ones((4, 2)) @ b.T, rtol=1e-6)
    assert grad_check(lambda x: T.sum_(T.matmul(x, Node(b))), a) < 1e-3


def test_backward_square():
    x = leaf([1.0, -2.0])
    backward(T.sum_(x * x))
    assert x.grad.tolist() == [2, -4]


def test_backward_rejects_vector_root():
    with pytest.raises(ContractError):
        backward(leaf([1.0, 2.0]) * 2.0)


def test_shared_subexpression_accumulates():
    x = leaf([3.0])
    y = x * x
    backward(y + y * 2.0)  # d/dx 3x^2
    assert x.grad.tolist() == [18.0]


def test_backward_returns_map_for_intermediates():
    x = leaf([1.0, 2.0])
    h = x * 3.0
    grads = backward(T.sum_(h))
    assert grads[h].tolist() == [1, 1]


def test_empty_dimension_rejected():
    with pytest.raises(DimensionError):
        Node(np.zeros((0, 3)))


def test_composed_graph_grad_check(rng):
    w = Node(rng.normal(size=(3, 3)))

    def f(x):
        h = T.matmul(x, w)
        return T.mean(T.log(h * h + 1.0)) + T.sum_(x * 0.5)

    assert grad_check(f, rng.uniform(-2, 2, size=(2, 3))) < 1e-3


def test_grad_check_sum_exact(rng):
    assert grad_check(T.sum_, rng.uniform(-2, 2, size=7)) < 1e-7


def test_grad_check_requires_scalar():
    with pytest.raises(ContractError):
        grad_check(lambda x: x * 2.0, np.ones(3))


def test_grad_check_kinked_abs_needs_caller_margin():
    # straddling the kink of |x| at 0 halves the central difference
    assert grad_check(lambda x: T.sum_(T.abs_(x)), np.array([0.0005])) > 0.4
    assert T.kink_crossings(lambda x: T.sum_(T.abs_(x)), np.array([0.0005])) == [0]
    assert T.kink_crossings(lambda x: T.sum_(T.abs_(x)), np.array([0.5])) == []


def test_precision_context_switches_leaf_dtype():
    assert Node([1.0]).value.dtype == np.float32
    with T.precision(np.float64):
        assert Node([1.0]).value.dtype == np.float64
    assert T.get_dtype() == np.float32


def test_gradients_cast_to_leaf_dtype():
    x = leaf([1.0, 2.0])
    with T.precision(np.float64):
        y = Node([0.5, 0.25])
    backward(T.sum_(x * y))
    assert x.grad.dtype == np.float32


def test_detach_blocks_gradient():
    x = leaf([2.0])
    y = T.detach(x * x) * x
    backward(y)
    assert x.grad.tolist() == [4.0]


def test_determinism_of_forward_and_backward(rng):
    x0 = rng.normal(size=(4, 4))

    def run():
        x = leaf(x0)
        out = T.mean(T.log(T.clamp_min(T.matmul(x, x) * 0.1 + 2.0, 1e-3)))
        backward(out)
        return out.value.tobytes(), x.grad.tobytes()

    assert run() == run()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-2, 2)))
def test_polynomial_gradient_property(x):
    f = lambda n: T.sum_(n * n * n - n * 2.0)  # noqa: E731
    xn = leaf(x)
    backward(f(xn))
    x32 = x.astype(np.float32).astype(np.float64)
    np.testing.assert_allclose(xn.grad, 3 * x32**2 - 2, rtol=1e-5, atol=1e-5)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, 6, elements=st.floats(-2, 2)),
    arrays(np.float64, 6, elements=st.floats(-2, 2)),
)
def test_gradient_of_two_consumers_is_sum(a, b):
    x = leaf(a)
    c = Node(b)
    both = T.sum_(x * c) + T.sum_(x * x)
    backward(both)
    g_both = x.grad.copy()
    x1, x2 = leaf(a), leaf(a)
    backward(T.sum_(x1 * c))
    backward(T.sum_(x2 * x2))
    np.testing.assert_allclose(g_both, x1.grad + x2.grad, rtol=1e-6, atol=1e-6)
