import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patternforge import tensor as T
from patternforge.tensor import Tensor, TensorError

from gradcheck import check_gradients, relative_error


def test_add_componentwise():
    out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
    npt.assert_array_equal(out.data, [4.0, 6.0])


def test_relu_definition():
    out = Tensor([-1.0, 0.0, 2.0]).relu()
    npt.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_backward_sum_of_squares():
    x = Tensor([1.0, -3.0], requires_grad=True)
    loss = x.square().sum()
    T.backward(loss)
    npt.assert_array_equal(x.grad, [2.0, -6.0])


def test_scalar_ops():
    x = Tensor([1.0, 2.0])
    npt.assert_array_equal((x * 3.0).data, [3.0, 6.0])
    npt.assert_array_equal((2.0 * x).data, [2.0, 4.0])
    npt.assert_array_equal((x + 1.0).data, [2.0, 3.0])
    npt.assert_array_equal((1.0 - x).data, [0.0, -1.0])
    npt.assert_array_equal((x / 2.0).data, [0.5, 1.0])


def test_shape_mismatch_raises():
    with pytest.raises(TensorError, match="shape mismatch"):
        Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])
    with pytest.raises(TensorError, match="shape mismatch"):
        Tensor([[1.0]]) * Tensor([1.0])


def test_log_domain_error():
    with pytest.raises(TensorError, match="positive"):
        Tensor([1.0, 0.0]).log()
    with pytest.raises(TensorError, match="positive"):
        Tensor([-1.0]).log()


def test_non_finite_construction_rejected():
    with pytest.raises(TensorError, match="finite"):
        Tensor([1.0, np.inf])
    with pytest.raises(TensorError, match="finite"):
        Tensor([np.nan])


def test_overflow_raises_instead_of_inf():
    with pytest.raises(TensorError, match="non-finite"):
        Tensor([1000.0]).exp()


def test_matmul_identity():
    x = np.arange(6.0).reshape(2, 3)
    out = Tensor(np.eye(2)) @ Tensor(x)
    npt.assert_array_equal(out.data, x)


def test_matmul_hand_summed():
    # [[1,2],[3,4]] @ [[1],[1]] summed by hand
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
    npt.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_dimension_mismatch():
    with pytest.raises(TensorError, match="inner extents"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_reduce_kinds():
    npt.assert_allclose(Tensor([1.0, 2.0, 3.0]).sum().item(), 6.0)
    m = Tensor([[1.0, 3.0], [3.0, 5.0]]).mean(axis=0)
    npt.assert_array_equal(m.data, [2.0, 4.0])
    v, i = Tensor([0.1, 0.7, 0.2]).max_with_index()
    assert (v.item(), i) == (0.7, 1)


def test_reduce_invalid_axis():
    with pytest.raises(TensorError, match="axis"):
        Tensor([1.0, 2.0]).sum(axis=2)


def test_max_with_index_axis():
    x = Tensor([[0.0, 5.0, 1.0], [7.0, 2.0, 3.0]])
    v, i = x.max_with_index(axis=1)
    npt.assert_array_equal(v.data, [5.0, 7.0])
    npt.assert_array_equal(i, [1, 0])


def test_log_softmax_symmetry():
    out = T.log_softmax(Tensor([[0.0, 0.0]]))
    npt.assert_allclose(out.data, [[np.log(0.5), np.log(0.5)]])


def test_log_softmax_stability():
    out = T.log_softmax(Tensor([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out.data))
    npt.assert_allclose(out.data[0, 0], 0.0, atol=1e-12)


def test_log_softmax_rows_sum_to_one():
    out = T.log_softmax(Tensor([[1.0, 2.0, 3.0]]))
    npt.assert_allclose(np.exp(out.data).sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(min_value=-1e3, max_value=1e3), min_size=2, max_size=8))
def test_log_softmax_rows_sum_property(row):
    out = T.log_softmax(Tensor([row]))
    npt.assert_allclose(np.exp(out.data).sum(axis=1), 1.0, atol=1e-12)


def test_backward_constant_loss_zero_grads():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * 0.0).sum()
    T.backward(loss)
    npt.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_log_exp_identity():
    x = Tensor([0.3, -0.7], requires_grad=True)
    loss = x.exp().log().sum()
    T.backward(loss)
    npt.assert_allclose(x.grad, [1.0, 1.0], rtol=1e-12)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * 2.0
    with pytest.raises(TensorError, match="scalar"):
        T.backward(y)
    T.backward(y.sum())  # leave no active tape behind


def test_backward_detached_loss():
    loss = Tensor(3.0)
    with pytest.raises(TensorError, match="tape"):
        T.backward(loss)


def test_backward_consumes_tape():
    x = Tensor([1.0], requires_grad=True)
    loss = x.sum()
    T.backward(loss)
    with pytest.raises(TensorError, match="tape"):
        T.backward(loss)


def test_unreached_branch_still_populates_leaf():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([5.0], requires_grad=True)
    _never_used = y * 3.0
    loss = x.sum()
    T.backward(loss)
    npt.assert_array_equal(x.grad, [1.0, 1.0])
    npt.assert_array_equal(y.grad, [0.0])


def test_no_grad_disables_recording():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert T.active_tape() is None


def test_frozen_input_gets_no_grad():
    w = Tensor([2.0], requires_grad=False)
    x = Tensor([3.0], requires_grad=True)
    loss = (w * x).sum()
    T.backward(loss)
    assert w.grad is None
    npt.assert_array_equal(x.grad, [2.0])


def test_take_per_row():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    out = T.take_per_row(x, [1, 0])
    npt.assert_array_equal(out.data, [2.0, 3.0])
    T.backward(out.sum())
    npt.assert_array_equal(x.grad, [[0.0, 1.0], [1.0, 0.0]])


def test_concat_and_split_gradient():
    a = Tensor([[1.0], [2.0]], requires_grad=True)
    b = Tensor([[3.0], [4.0]], requires_grad=True)
    out = T.concat([a, b], axis=1)
    npt.assert_array_equal(out.data, [[1.0, 3.0], [2.0, 4.0]])
    T.backward((out * Tensor([[1.0, 10.0], [100.0, 1000.0]])).sum())
    npt.assert_array_equal(a.grad, [[1.0], [100.0]])
    npt.assert_array_equal(b.grad, [[10.0], [1000.0]])


def test_clip01_range_and_gradient():
    x = Tensor([-0.5, 0.25, 1.5], requires_grad=True)
    out = T.clip01(x)
    npt.assert_array_equal(out.data, [0.0, 0.25, 1.0])
    T.backward(out.sum())
    npt.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_forward_does_not_mutate_inputs():
    rng = np.random.default_rng(0)
    a_arr = rng.normal(size=(3, 4))
    b_arr = rng.normal(size=(3, 4))
    a, b = Tensor(a_arr.copy()), Tensor(b_arr.copy())
    for out in [a + b, a - b, a * b, -a, a.relu(), a.abs(), a.square(),
                a.exp(), T.concat([a, b], axis=0), a.reshape(4, 3)]:
        del out
    npt.assert_array_equal(a.data, a_arr)
    npt.assert_array_equal(b.data, b_arr)


def test_empty_tensor_flows_through():
    x = Tensor(np.zeros((0, 3)))
    assert (x + x).shape == (0, 3)
    assert (Tensor(np.zeros((0, 3))) @ Tensor(np.zeros((3, 2)))).shape == (0, 2)


# -- finite-difference oracle checks -----------------------------------------


def test_gradcheck_elementwise_chain():
    rng = np.random.default_rng(1)
    for _ in range(5):
        arrays = {
            "a": rng.uniform(-1.0, 1.0, size=(3, 4)),
            "b": rng.uniform(0.1, 1.0, size=(3, 4)),
        }
        check_gradients(
            lambda t: ((t["a"] * t["b"] + t["a"].square()).exp()
                       + t["b"].log() - t["a"].abs()).sum(),
            arrays,
        )


def test_gradcheck_matmul_random():
    rng = np.random.default_rng(2)
    for _ in range(5):
        arrays = {
            "a": rng.uniform(-1.0, 1.0, size=(3, 4)),
            "b": rng.uniform(-1.0, 1.0, size=(4, 2)),
        }
        worst = check_gradients(
            lambda t: ((t["a"] @ t["b"]).square()).sum(), arrays, tol=1e-6
        )
        assert worst < 1e-6


def test_gradcheck_reductions_and_softmax():
    rng = np.random.default_rng(3)
    for _ in range(5):
        arrays = {"x": rng.uniform(-1.0, 1.0, size=(4, 5))}
        check_gradients(
            lambda t: T.log_softmax(t["x"]).square().mean(), arrays
        )
        check_gradients(
            lambda t: t["x"].mean(axis=1).square().sum(), arrays
        )
        check_gradients(
            lambda t: (t["x"].sum(axis=0) * t["x"].mean(axis=0)).sum(), arrays
        )


def test_gradcheck_max_with_index():
    rng = np.random.default_rng(4)
    for _ in range(5):
        x = rng.uniform(-1.0, 1.0, size=(3, 6))

        def build(t):
            v, _ = t["x"].max_with_index(axis=1)
            return v.square().sum()

        check_gradients(build, {"x": x})


def test_relative_error_helper():
    assert relative_error(np.array([1.0]), np.array([1.0 + 1e-9])) < 1e-8
    assert relative_error(np.array([0.0]), np.array([0.0])) == 0.0
