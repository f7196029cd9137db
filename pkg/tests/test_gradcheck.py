import numpy as np
import pytest

from apnet import tensor as T
from apnet.gradcheck import GradCheckError, grad_check, run_grad_check_suite
from apnet.tensor import Value


class TestGradCheck:
    def test_constant_function_has_zero_error(self):
        report = grad_check(lambda v: Value(3.0), [np.ones(3)], name="const")
        assert report.errors == (0.0,)
        assert report.passed

    def test_relu_away_from_kink(self):
        x = np.array([-1.0, -0.3, 0.4, 2.0])
        report = grad_check(lambda v: (T.relu(v[0]) * Value([1.0, 2.0, 3.0, 4.0])).sum(), [x])
        assert report.passed
        assert report.max_error < 1e-8

    def test_detects_wrong_backward(self):
        def broken(v):
            x = v[0]
            # прямой проход x², обратный как у 3x
            out = T._node(x.data**2, (x,), lambda g: x.accumulate(3 * g))
            return out.sum()

        report = grad_check(broken, [np.array([1.0, 2.0])])
        assert not report.passed

    def test_non_scalar_output(self):
        with pytest.raises(GradCheckError):
            grad_check(lambda v: v[0] * 2.0, [np.ones(3)])

    def test_non_finite_output(self):
        with pytest.raises(GradCheckError):
            grad_check(lambda v: T.log(v[0]).sum(), [np.array([-1.0])])

    def test_error_per_input(self):
        report = grad_check(lambda v: (v[0] * v[1]).sum(), [np.ones(2), np.ones(2)])
        assert len(report.errors) == 2


class TestSuite:
    def test_elementwise_and_structural(self):
        names = ["add", "mul", "div", "matmul", "gather", "scatter_add", "softmax", "log_softmax", "max_reduce"]
        reports = run_grad_check_suite(trials=3, seed=0, only=names)
        assert {r.name for r in reports} == set(names)
        assert all(r.passed for r in reports), [(r.name, r.max_error) for r in reports]

    def test_image_ops(self):
        names = ["conv2d", "max_pool2d", "upsample_nearest", "bilinear_sample"]
        reports = run_grad_check_suite(trials=2, seed=1, only=names)
        assert all(r.passed for r in reports), [(r.name, r.max_error) for r in reports]

    @pytest.mark.slow
    def test_full_suite(self):
        reports = run_grad_check_suite(trials=100, seed=0)
        failed = [(r.name, r.max_error) for r in reports if not r.passed]
        assert not failed
