import numpy as np
import pytest

from starchnet import functional as F
from starchnet import gradcheck
from starchnet.errors import ArgumentError
from starchnet.tensor import Tensor, make_result


def broken_relu(x):
    """relu whose backward forgets to mask: a deliberately wrong rule."""
    return make_result(np.maximum(x.data, 0), (x,), lambda g: (g,), "relu")


def test_conv_relu_sum_passes():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    err = gradcheck.grad_check(lambda a, b: F.relu(F.conv2d(a, b, padding=1)).sum(), [x, w])
    assert err < 1e-4


def test_identity_linear_sum_is_exact():
    x = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
    w = Tensor(np.eye(4))
    err = gradcheck.grad_check(lambda a: F.linear(a, w).sum(), [x])
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
    assert err < 1e-10


def test_corrupted_backward_is_caught():
    x = Tensor(np.random.default_rng(2).standard_normal((4, 5)))
    assert gradcheck.grad_check(lambda a: broken_relu(a).sum(), [x]) > 1e-1


def test_non_scalar_closure_rejected():
    with pytest.raises(ArgumentError):
        gradcheck.grad_check(lambda a: a * 2.0, [Tensor(np.ones(3))])


def test_composed_loss_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((4, 6)))
    w = Tensor(rng.standard_normal((5, 6)))
    b = Tensor(rng.standard_normal(5))
    targets = rng.integers(0, 5, 4)
    err = gradcheck.grad_check(lambda a, c, d: F.nll_loss(F.log_softmax(F.linear(a, c, d)), targets), [x, w, b])
    assert err < 1e-4


def test_suite_covers_every_op_and_passes():
    results = gradcheck.run_suite(seed=5, cases_per_op=20)
    assert set(results) == {
        "conv2d", "batchnorm2d", "relu", "maxpool2d", "global_avgpool",
        "linear", "log_softmax", "nll_loss", "head",
    }
    assert max(results.values()) < gradcheck.THRESHOLD


def test_suite_flags_mutated_op(monkeypatch):
    monkeypatch.setattr(F, "relu", broken_relu)
    results = gradcheck.run_suite(seed=0, cases_per_op=5)
    assert results["relu"] > 1e-1


def test_suite_is_deterministic():
    assert gradcheck.run_suite(seed=9, cases_per_op=3) == gradcheck.run_suite(seed=9, cases_per_op=3)
