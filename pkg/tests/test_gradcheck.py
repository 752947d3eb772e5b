import numpy as np

from ipt_lab import ops
from ipt_lab.gradcheck import finite_diff_check
from ipt_lab.tensor import Tensor


def test_correct_gradient_passes():
    x = Tensor(np.array([0.3, -1.2, 2.0]))
    assert finite_diff_check(lambda t: ops.sum(ops.mul(t, ops.tanh(t))), x) < 1e-6


def test_wrong_gradient_is_detected():
    def half_square(t):
        return ops._make("bad_square", np.sum(t.data ** 2), (t,), lambda g: (g * t.data,))

    assert finite_diff_check(half_square, Tensor(np.array([1.0, 2.0]))) > 0.4


def test_non_finite_value_reports_inf():
    assert finite_diff_check(lambda t: ops.sum(ops.log(t)), Tensor(np.array([-1.0, 2.0]))) == float("inf")


def test_point_is_restored():
    x = Tensor(np.array([1.0, 2.0, 3.0]))
    before = x.data.copy()
    finite_diff_check(lambda t: ops.sum(ops.exp(t)), x)
    np.testing.assert_array_equal(x.data, before)
    assert x.grad is None
    assert not x.requires_grad


def test_coordinate_subset():
    x = Tensor(np.linspace(-1, 1, 50))
    assert finite_diff_check(lambda t: ops.sum(ops.gelu(t)), x, coords=[0, 10, 49]) < 1e-6
