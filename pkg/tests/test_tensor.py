import numpy as np
import pytest

from ipt_lab import ops
from ipt_lab.nn import param
from ipt_lab.tensor import Tape, Tensor, active_tape, backward


def test_ops_outside_a_tape_record_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ops.mul(x, 3.0)
    assert y.node is None
    assert active_tape() is None


def test_backward_fills_leaf_gradients():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.add(ops.mul(x, x), x))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_module_level_backward_uses_the_recording_tape():
    x = Tensor([0.5, 1.5], requires_grad=True)
    with Tape():
        loss = ops.sum(ops.exp(x))
    backward(loss)
    np.testing.assert_allclose(x.grad, np.exp(x.data))


def test_frozen_parameter_passes_gradient_upstream():
    w = param("w", np.array([[1.0, 2.0], [3.0, 4.0]]), frozen=True)
    x = Tensor([1.0, 1.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.matmul(x, w.tensor))
    tape.backward(loss)
    assert w.grad is None
    np.testing.assert_allclose(x.grad, w.data.sum(axis=1))


def test_double_backward_is_rejected():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        loss = ops.mul(x, x)
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_backward_needs_a_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ops.mul(x, 2.0)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_backward_without_history_is_rejected():
    with pytest.raises(ValueError):
        backward(Tensor(1.0))


def test_loss_from_another_tape_is_rejected():
    x = Tensor(1.0, requires_grad=True)
    with Tape():
        loss = ops.mul(x, 2.0)
    with Tape() as other:
        pass
    with pytest.raises(ValueError):
        other.backward(loss)


def test_reused_intermediate_accumulates():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        y = ops.mul(x, 3.0)
        loss = ops.sum(ops.add(y, y))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [6.0])


def test_freezing_clears_an_existing_gradient():
    w = param("w", np.ones(3))
    w.tensor.grad = np.ones(3)
    w.frozen = True
    assert w.grad is None
    assert not w.tensor.requires_grad
