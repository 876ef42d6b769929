import numpy as np
import pytest
from groupkan import tensor
from groupkan.errors import ContractError, DimensionError
from groupkan.tensor import Parameter, Tape, Tensor

from .common import max_relative_error, numeric_gradient, random_tensor, tape_gradient


def test_tensor_stores_float64():
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float64
    assert t.shape == (2, 2)
    assert t.size == 4
    assert t.grad is None


def test_scalar_tensor_has_empty_shape():
    t = Tensor(3.0)
    assert t.shape == ()
    assert t.size == 1
    assert t.item() == 3.0


def test_rejects_zero_extent():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 0)))


def test_item_needs_single_element():
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).item()


def test_no_recording_outside_tape():
    x = Parameter(np.ones(3))
    y = x * 2.0
    assert y.tape is None


def test_records_only_when_grad_required():
    with Tape() as tape:
        Tensor([1.0]) + Tensor([2.0])
        assert len(tape) == 0
        Parameter([1.0]) + Tensor([2.0])
        assert len(tape) == 1


def test_backward_sum_gives_ones():
    x = Parameter(np.arange(6.0).reshape(2, 3))
    with Tape():
        loss = x.sum()
    loss.backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_gives_2x():
    rng = np.random.default_rng(0)
    x = random_tensor(rng, 4, 5)
    with Tape():
        loss = (x * x).sum()
    loss.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=1e-15)


def test_repeated_backward_accumulates():
    x = Parameter([1.0, -2.0])
    for _ in range(2):
        with Tape():
            loss = (x * 3.0).sum()
        loss.backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward_needs_scalar_loss():
    x = Parameter([1.0, 2.0])
    with Tape():
        out = x * 2.0
    with pytest.raises(ContractError):
        out.backward()


def test_backward_needs_recorded_loss():
    with pytest.raises(ContractError):
        tensor.backward(Tensor(1.0))


def test_empty_tape_backward():
    with pytest.raises(ContractError):
        Tape().backward(Tensor(1.0))


def test_intermediate_gradients_are_populated():
    x = Parameter([1.0, 2.0])
    with Tape():
        y = x * 2.0
        loss = y.sum()
    loss.backward()
    np.testing.assert_array_equal(y.grad, [1.0, 1.0])
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_tape_is_restored_after_context():
    with Tape() as outer:
        with Tape() as inner:
            assert tensor.active_tape() is inner
        assert tensor.active_tape() is outer
    assert tensor.active_tape() is None


@pytest.mark.parametrize(
    "a,b,expected",
    [
        ((2, 3), (3,), (2, 3)),
        ((2, 3), (1, 3), (2, 3)),
        ((4, 1), (4, 5), (4, 5)),
        ((), (2, 2), (2, 2)),
    ],
)
def test_broadcast_shape(a, b, expected):
    assert tensor.broadcast_shape(a, b) == expected


@pytest.mark.parametrize("a,b", [((2, 3), (2,)), ((2, 1), (1, 3)), ((3,), (4,))])
def test_broadcast_shape_rejects(a, b):
    with pytest.raises(DimensionError):
        tensor.broadcast_shape(a, b)


def test_broadcast_gradient_is_summed():
    rng = np.random.default_rng(1)
    x = random_tensor(rng, 3, 4)
    row = random_tensor(rng, 4)
    grads = tape_gradient(lambda: (x * row).sum(), x, row)
    np.testing.assert_allclose(grads[1], x.data.sum(axis=0), atol=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_arithmetic_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = random_tensor(rng, 3, 4)
    b = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)

    def fn():
        return ((a - b) * a / b + (-a)).mean()

    grad_a, grad_b = tape_gradient(fn, a, b)
    assert max_relative_error(grad_a, numeric_gradient(fn, a)) < 1e-6
    assert max_relative_error(grad_b, numeric_gradient(fn, b)) < 1e-6


def test_reshape_and_permute_preserve_values():
    data = np.arange(24.0).reshape(2, 3, 4)
    t = Tensor(data)
    permuted = t.permute(2, 0, 1).reshape(4, 6)
    assert sorted(permuted.data.ravel()) == sorted(data.ravel())
    np.testing.assert_array_equal(permuted.data, data.transpose(2, 0, 1).reshape(4, 6))


def test_invalid_reshape_and_permutation():
    t = Tensor(np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        t.reshape(4, 2)
    with pytest.raises(DimensionError):
        t.permute(0, 0)


def test_concat_gradient_splits():
    a, b = Parameter(np.ones((2, 1))), Parameter(np.ones((2, 3)))
    weights = Tensor(np.arange(8.0).reshape(2, 4))
    grads = tape_gradient(lambda: (tensor.concat([a, b], axis=1) * weights).sum(), a, b)
    np.testing.assert_array_equal(grads[0], [[0.0], [4.0]])
    np.testing.assert_array_equal(grads[1], [[1.0, 2.0, 3.0], [5.0, 6.0, 7.0]])


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((5, 5)), rng.standard_normal((5,))
    first = (Tensor(a) * Tensor(b) + Tensor(a)).sum(axis=0).data
    second = (Tensor(a) * Tensor(b) + Tensor(a)).sum(axis=0).data
    assert first.tobytes() == second.tobytes()
