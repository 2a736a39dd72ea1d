import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays, broadcastable_shapes, array_shapes

import gradsuite
from speechllm.autodiff import (
    Tensor,
    backward,
    default_dtype,
    get_default_dtype,
    grad_enabled,
    no_grad,
    parameter,
    take_rows,
)
from speechllm.autodiff.tensor import _unbroadcast
from speechllm.errors import ContractError


@pytest.mark.parametrize("builder", gradsuite.CASES, ids=lambda b: b.__name__)
def test_backward_matches_finite_differences(builder):
    for seed in range(3):
        assert gradsuite.check_case(builder, seed) < gradsuite.TOL


def test_backward_requires_scalar():
    x = parameter(np.ones((2, 2)))
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_gradients_accumulate_on_leaves():
    x = parameter(np.array([1.0, 2.0]))
    backward((x * x).sum())
    backward((x * 3.0).sum())
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_reused_node_gets_summed_gradient():
    x = parameter(np.array(3.0))
    y = x * x
    z = y + y * 2.0
    backward(z)
    assert x.grad == pytest.approx(6.0 * 3.0)


def test_inputs_without_path_get_zero_gradient():
    a, b = parameter(np.ones(3)), parameter(np.ones(2))
    ga, gb = backward(a.sum(), inputs=[a, b])
    np.testing.assert_array_equal(ga, np.ones(3))
    np.testing.assert_array_equal(gb, np.zeros(2))


def test_no_grad_builds_no_graph():
    x = parameter(np.ones(3))
    with no_grad():
        assert not grad_enabled()
        y = (x * 2.0).sum()
    assert grad_enabled()
    assert not y.requires_grad


def test_frozen_tensors_receive_no_gradient():
    w = parameter(np.ones((2, 2)))
    frozen = Tensor(np.ones((2, 2)))
    backward((w @ frozen).sum())
    assert frozen.grad is None
    assert w.grad is not None


def test_default_dtype_context():
    assert get_default_dtype() == np.float32
    with default_dtype(np.float64):
        assert get_default_dtype() == np.float64
    assert get_default_dtype() == np.float32


def test_take_rows_accumulates_repeated_ids():
    table = parameter(np.zeros((4, 2)))
    out = take_rows(table, np.array([[1, 1], [3, 1]]))
    backward(out.sum())
    np.testing.assert_array_equal(table.grad, [[0, 0], [3, 3], [0, 0], [1, 1]])


@given(st.data())
def test_unbroadcast_inverts_broadcasting(data):
    shape = data.draw(array_shapes(min_dims=0, max_dims=3, max_side=4))
    bshape = data.draw(broadcastable_shapes(shape, min_dims=len(shape), max_dims=4, max_side=4))
    out_shape = np.broadcast_shapes(shape, bshape)
    g = data.draw(arrays(np.float64, out_shape, elements=st.floats(-10, 10)))
    reduced = _unbroadcast(g, shape)
    assert reduced.shape == shape
    # summing the broadcast gradient must preserve the total
    assert np.isclose(reduced.sum(), g.sum())


@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), arrays(np.float64, (4,), elements=st.floats(-5, 5)))
def test_broadcast_add_gradient(a, b):
    ta, tb = parameter(a), parameter(b)
    backward((ta + tb).sum())
    np.testing.assert_array_equal(ta.grad, np.ones_like(a))
    np.testing.assert_array_equal(tb.grad, np.full_like(b, 3.0))
