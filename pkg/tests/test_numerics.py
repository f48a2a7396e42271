"""
Tests for the numpy gradient engine

Covers:
- gradients of every primitive against central finite differences (float64)
- subgradient conventions at non-differentiable points
- record misuse: non-scalar loss, second backward, mixed records
- shape errors and float64 accumulation in reductions
"""

import pytest
import os
import sys

import numpy as np

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from skill_lab import numerics as nx
from skill_lab.errors import GradientError, ShapeError


def numeric_grad(fn, x, eps=1e-6):
    """Central differences of a scalar function of a float64 array"""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[idx] += eps
        minus[idx] -= eps
        grad[idx] = (fn(plus) - fn(minus)) / (2 * eps)
    return grad


def analytic_grad(build, x):
    record = nx.ComputationRecord()
    leaf = record.watch(x, dtype="float64")
    record.backward(build(leaf))
    return leaf.grad


def check_gradient(build, x, atol=1e-6):
    expected = numeric_grad(lambda v: build(nx.Tensor(v)).item(), x)
    actual = analytic_grad(build, x)
    np.testing.assert_allclose(actual, expected, atol=atol, rtol=1e-5)


@pytest.mark.unit_test
def test_sum_of_squares_gradient_is_twice_the_input():
    record = nx.ComputationRecord()
    theta = record.watch([1.0, 2.0])
    loss = nx.sum_all(theta * theta)
    record.backward(loss)
    assert theta.grad.tolist() == [2.0, 4.0], f"Sum of squares test failed: grad {theta.grad}"


@pytest.mark.unit_test
def test_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))
    check_gradient(lambda t: nx.sum_all(nx.square(nx.matmul(t, b))), a)
    check_gradient(lambda t: nx.sum_all(nx.square(nx.matmul(a, t))), b)


@pytest.mark.unit_test
def test_batched_matmul_with_transpose_matches_finite_differences():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(2, 3, 4))
    k = rng.normal(size=(2, 3, 4))
    check_gradient(lambda t: nx.sum_all(nx.square(nx.matmul(t, nx.transpose(nx.Tensor(k), (0, 2, 1))))), q)


@pytest.mark.unit_test
def test_softmax_and_log_softmax_gradients():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 5))
    check_gradient(lambda t: nx.sum_all(nx.mul(nx.softmax(t), w)), x)
    check_gradient(lambda t: nx.sum_all(nx.mul(nx.log_softmax(t), w)), x)


@pytest.mark.unit_test
def test_log_softmax_is_stable_for_large_logits():
    out = nx.log_softmax(nx.Tensor(np.array([[1000.0, 0.0]])))
    assert np.all(np.isfinite(out.data)), f"Stability test failed: {out.data}"
    assert out.data[0, 0] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.unit_test
def test_layer_norm_gradients_for_input_gain_and_bias():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 6))
    gain = rng.normal(size=6)
    bias = rng.normal(size=6)
    w = rng.normal(size=(2, 3, 6))

    def through(xv, gv, bv):
        return nx.sum_all(nx.mul(nx.layer_norm(xv, gv, bv), w))

    check_gradient(lambda t: through(t, nx.Tensor(gain), nx.Tensor(bias)), x, atol=1e-5)
    check_gradient(lambda t: through(nx.Tensor(x), t, nx.Tensor(bias)), gain)
    check_gradient(lambda t: through(nx.Tensor(x), nx.Tensor(gain), t), bias)


@pytest.mark.unit_test
def test_gelu_gradient():
    x = np.linspace(-3, 3, 13)
    check_gradient(lambda t: nx.sum_all(nx.gelu(t)), x)


@pytest.mark.unit_test
def test_indexing_primitives_scatter_gradients_back():
    rng = np.random.default_rng(4)
    table = rng.normal(size=(6, 3))
    ids = np.array([[0, 2, 2], [5, 1, 0]])
    check_gradient(lambda t: nx.sum_all(nx.square(nx.embedding(t, ids))), table)

    x = rng.normal(size=(2, 3, 4))
    bi, pi = np.array([0, 1, 1]), np.array([2, 0, 2])
    check_gradient(lambda t: nx.sum_all(nx.square(nx.index_rows(t, bi, pi))), x)

    m = rng.normal(size=(3, 4))
    check_gradient(lambda t: nx.sum_all(nx.square(nx.take_columns(t, np.array([3, 1])))), m)
    check_gradient(lambda t: nx.sum_all(nx.square(nx.pick(t, np.array([0, 0, 3])))), m)


@pytest.mark.unit_test
def test_layout_primitives():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 6))
    w = rng.normal(size=(3, 4))
    check_gradient(lambda t: nx.sum_all(nx.mul(nx.reshape(t, (3, 4)), w)), x)
    check_gradient(
        lambda t: nx.sum_all(nx.square(nx.concat([nx.slice_last(t, 0, 2), nx.slice_last(t, 4, 6)], axis=-1))), x
    )
    check_gradient(lambda t: nx.sum_all(nx.square(nx.sum_axis(t, 0))), x)


@pytest.mark.unit_test
def test_sqrt_and_absolute_have_zero_gradient_at_zero():
    grad = analytic_grad(lambda t: nx.sum_all(nx.sqrt(t)), np.array([0.0, 4.0]))
    assert grad.tolist() == [0.0, 0.25], f"sqrt subgradient test failed: {grad}"

    grad = analytic_grad(lambda t: nx.sum_all(nx.absolute(t)), np.array([-2.0, 0.0, 3.0]))
    assert grad.tolist() == [-1.0, 0.0, 1.0], f"abs subgradient test failed: {grad}"


@pytest.mark.unit_test
def test_sqrt_rejects_negative_input():
    with pytest.raises(ShapeError):
        nx.sqrt(nx.Tensor([-1.0]))


@pytest.mark.unit_test
def test_clip_max_blocks_gradient_where_clamped():
    grad = analytic_grad(lambda t: nx.sum_all(nx.clip_max(t, 1.0)), np.array([0.5, 2.0]))
    assert grad.tolist() == [1.0, 0.0], f"clip test failed: {grad}"


@pytest.mark.unit_test
def test_quadratic_penalty_value_and_gradient():
    record = nx.ComputationRecord()
    x = record.watch([3.0, 1.0], dtype="float64")
    loss = nx.quadratic_penalty(x, np.array([1.0, 0.0]), np.array([1.0, 2.0]))
    assert loss.item() == pytest.approx(3.0)
    record.backward(loss)
    assert x.grad.tolist() == [2.0, 2.0], f"Penalty gradient test failed: {x.grad}"


@pytest.mark.unit_test
def test_reductions_accumulate_in_float64():
    x = nx.Tensor(np.array([1e8, 1.0, -1e8], dtype=np.float32))
    total = nx.sum_all(x)
    assert total.dtype == np.float32
    assert total.item() == 1.0, f"Accumulation test failed: got {total.item()}"


@pytest.mark.unit_test
def test_unreached_leaves_get_zero_gradient():
    record = nx.ComputationRecord()
    used = record.watch([1.0, 2.0])
    unused = record.watch([5.0])
    record.backward(nx.sum_all(used))
    assert unused.grad.tolist() == [0.0]


@pytest.mark.unit_test
def test_backward_requires_scalar_loss():
    record = nx.ComputationRecord()
    x = record.watch([1.0, 2.0])
    with pytest.raises(GradientError):
        record.backward(nx.square(x))


@pytest.mark.unit_test
def test_second_backward_is_rejected():
    record = nx.ComputationRecord()
    x = record.watch([1.0, 2.0])
    loss = nx.sum_all(x)
    record.backward(loss)
    with pytest.raises(GradientError):
        record.backward(loss)


@pytest.mark.unit_test
def test_mixing_records_is_rejected():
    a = nx.ComputationRecord().watch([1.0])
    b = nx.ComputationRecord().watch([2.0])
    with pytest.raises(GradientError):
        nx.add(a, b)


@pytest.mark.unit_test
def test_shape_errors():
    with pytest.raises(ShapeError, match="inner dimensions"):
        nx.matmul(nx.Tensor(np.zeros((2, 3))), nx.Tensor(np.zeros((4, 5))))
    with pytest.raises(ShapeError, match="do not broadcast"):
        nx.add(nx.Tensor(np.zeros(3)), nx.Tensor(np.zeros(4)))
    with pytest.raises(ShapeError):
        nx.take_columns(nx.Tensor(np.zeros((2, 3))), np.array([1, 1]))
    with pytest.raises(ShapeError):
        nx.mean_all(nx.Tensor(np.zeros(0)))


@pytest.mark.unit_test
def test_untracked_inputs_produce_untracked_outputs():
    out = nx.add(nx.Tensor([1.0]), nx.Tensor([2.0]))
    assert out.record is None and not out.requires_grad
