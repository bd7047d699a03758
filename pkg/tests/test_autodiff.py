import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from relnet import autodiff as ad
from relnet.autodiff import ContractError, Node, ShapeError, backward, grad_check


def test_matmul_identity():
    m = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(ad.matmul(np.eye(3), m).value, m)


def test_matmul_hand_product():
    out = ad.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.value, [[3.0], [7.0]])


def test_matmul_zeros_annihilate():
    m = np.arange(4.0).reshape(2, 2)
    np.testing.assert_array_equal(ad.matmul(np.zeros((2, 2)), m).value, np.zeros((2, 2)))


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax_rows(np.zeros((1, 3))).value, [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(ad.softmax_rows(np.array([[1000.0, 1000.0]])).value, [[0.5, 0.5]])
    np.testing.assert_allclose(ad.softmax_rows(np.array([[0.0, np.log(3.0)]])).value, [[0.25, 0.75]], atol=1e-15)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax_rows(x).value
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_relu_examples():
    assert ad.relu(np.array([-0.5])).value.tolist() == [0.0]
    assert ad.relu(np.array([2.5])).value.tolist() == [2.5]
    assert ad.relu(np.array([-1.0, 0.0, 1.0])).value.tolist() == [0.0, 0.0, 1.0]


def test_relu_subgradient_at_zero_is_zero():
    x = Node(np.array([0.0, 1.0]))
    backward(ad.sum(ad.relu(x)))
    assert x.grad.tolist() == [0.0, 1.0]


def test_backward_linear_hand_chain_rule():
    w = Node(np.array([[1.0, 2.0], [3.0, 4.0]]))
    x = np.array([[5.0], [7.0]])
    backward(ad.sum(ad.matmul(w, x)))
    # d/dW_ij sum_i sum_j W_ij x_j = x_j
    np.testing.assert_array_equal(w.grad, [[5.0, 7.0], [5.0, 7.0]])


def test_backward_unused_parameter_gets_zero():
    w = Node(np.ones((2, 2)))
    x = Node(np.array([1.0, 2.0]))
    backward(ad.sum(x * x))
    assert w.grad is None or not np.any(w.grad)


def test_backward_bce_label0_gradient():
    s0, s1 = 0.3, Node(np.array(0.6))
    loss = ad.neg(ad.log(1 - s1 * s0))
    backward(loss)
    assert abs(float(s1.grad) - s0 / (1 - s0 * 0.6)) < 1e-12


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        backward(Node(np.ones(3)) * 2.0)


def test_repeated_paths_sum():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=(3, 3))
    x = rng.normal(size=(3, 1))

    def grad_of(fn):
        w = Node(w0)
        backward(fn(w))
        return w.grad

    path_a = lambda w: ad.sum(ad.matmul(w, x))  # noqa: E731
    path_b = lambda w: ad.sum(ad.exp(w) * 0.5)  # noqa: E731
    both = grad_of(lambda w: path_a(w) + path_b(w))
    np.testing.assert_allclose(both, grad_of(path_a) + grad_of(path_b), atol=1e-14)


def test_grad_check_quadratic_is_tight():
    x = np.random.default_rng(3).normal(size=(5,))
    rep = grad_check(lambda p: ad.sum(p["x"] * p["x"]), {"x": x}, step=1e-5)
    assert rep.max_rel_error < 1e-8
    assert rep.passed


def test_grad_check_constant_function():
    rep = grad_check(lambda p: ad.sum(p["x"] * 0.0) + 4.0, {"x": np.ones(3)})
    assert rep.max_rel_error == 0.0
    assert rep.passed


def test_grad_check_flags_a_wrong_gradient():
    def broken(p):
        x = p["x"]
        out = Node(x.value**2, parents=(x,), backward=lambda g: (g * 3 * x.value,))  # should be 2x
        return ad.sum(out)

    rep = grad_check(broken, {"x": np.array([1.0, 2.0])})
    assert not rep.passed


def test_grad_check_rejects_bad_step():
    with pytest.raises(ContractError):
        grad_check(lambda p: ad.sum(p["x"]), {"x": np.ones(2)}, step=0.0)


def test_weighted_softmax_zero_column():
    logits = np.zeros((3, 2))
    weights = np.array([[1.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    out = ad.weighted_softmax(logits, weights, axis=0).value
    np.testing.assert_allclose(out[:, 0], [0.25, 0.25, 0.5])
    assert not np.any(out[:, 1])


def test_node_value_is_read_only_view():
    a = np.ones(3)
    n = Node(a)
    a[0] = 5.0  # caller keeps ownership of its array
    with pytest.raises(ValueError):
        n.value[0] = 1.0
