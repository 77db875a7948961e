import json

import numpy as np
import pytest

from model import diffcore as dc
from model.errors import DegenerateBatch, EmptyInput, NonFinite, ShapeMismatch, ZeroVector


def _param(rng, *shape, name="p"):
    return dc.parameter(rng.standard_normal(shape), name=name)


class TestValue:
    def test_data_is_float64_copy(self):
        src = np.array([1, 2, 3], dtype=np.int32)
        v = dc.Value(src)
        src[0] = 99
        assert v.data.dtype == np.float64
        assert v.data[0] == 1.0

    def test_shared_subexpression_accumulates(self):
        x = dc.parameter(np.array([3.0]))
        y = x * x + x
        y.backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_backward_requires_scalar_without_seed(self):
        x = dc.parameter(np.ones((2, 2)))
        with pytest.raises(ShapeMismatch):
            (x * 2.0).backward()

    def test_gradients_accumulate_until_zeroed(self):
        x = dc.parameter(np.array([1.0, 2.0]))
        dc.sum_all(x * 3.0).backward()
        dc.sum_all(x * 3.0).backward()
        np.testing.assert_allclose(x.grad, [6.0, 6.0])
        x.zero_grad()
        assert not np.any(x.grad)

    def test_broadcast_add_unbroadcasts_gradient(self, rng):
        a = _param(rng, 4, 3)
        b = _param(rng, 3)
        dc.sum_all(a + b).backward()
        np.testing.assert_allclose(b.grad, np.full(3, 4.0))


class TestOpsGradcheck:
    """Every op checked against central differences on random inputs."""

    @pytest.mark.parametrize("op", [
        lambda a, b: dc.sum_all(dc.mul(a, b)),
        lambda a, b: dc.sum_all(dc.sigmoid(a) * b),
        lambda a, b: dc.sum_all(dc.matmul(a, dc.swap_last(b))),
        lambda a, b: dc.sum_all(dc.relu(a - b) * a),
        lambda a, b: dc.sum_all(dc.concat([a, b], axis=0) * dc.concat([b, a], axis=0)),
        lambda a, b: dc.sum_all(dc.softmax_rows(a) * b),
        lambda a, b: dc.sum_all(dc.l2_normalize_rows(a) * b),
        lambda a, b: dc.sum_all(dc.mean_pool_nodes(a) * dc.mean_pool_nodes(b)),
        lambda a, b: dc.sum_all(dc.scaled_dot(a, b, 2.0) * dc.scaled_dot(b, a, 3.0)),
    ])
    def test_binary_ops(self, rng, op):
        a = _param(rng, 4, 3, name="a")
        b = _param(rng, 4, 3, name="b")
        report = dc.gradcheck(lambda: op(a, b), [a, b])
        assert report.passed, report.to_dict()

    def test_linear_and_take(self, rng):
        x = _param(rng, 5, 4, name="x")
        W = _param(rng, 4, 3, name="W")
        bias = _param(rng, 3, name="bias")
        idx = (np.array([0, 2, 2, 4]), np.array([1, 0, 0, 2]))
        report = dc.gradcheck(lambda: dc.sum_all(dc.sigmoid(dc.take(dc.linear(x, W, bias), idx))),
                              [x, W, bias])
        assert report.passed

    def test_masked_softmax_and_pool(self, rng):
        x = _param(rng, 2, 5, 5, name="x")
        w = _param(rng, 2, 5, 5, name="w")
        mask = np.array([[True] * 5, [True, True, True, False, False]])
        report = dc.gradcheck(
            lambda: dc.sum_all(dc.mean_pool_nodes(dc.softmax_rows(x, mask[:, None, :]) * w, mask)),
            [x, w])
        assert report.passed

    def test_faulty_identity_fails(self, rng):
        x = _param(rng, 3, 2)
        report = dc.gradcheck(lambda: dc.sum_all(dc.faulty_identity(x) * x), [x])
        assert not report.passed
        assert report.max_rel_error > 0.1

    def test_zero_tolerance_fails(self, rng):
        x = _param(rng, 3, 2)
        report = dc.gradcheck(lambda: dc.sum_all(dc.sigmoid(x)), [x], tol=0.0)
        assert not report.passed

    def test_entry_sampling_limits_checked_count(self, rng):
        x = _param(rng, 10, 10)
        report = dc.gradcheck(lambda: dc.sum_all(x * x), [x], max_entries=7)
        assert report.checked == 7
        assert report.passed

    def test_report_holds_builtin_types(self, rng):
        x = _param(rng, 4, 3, name="x")
        report = dc.gradcheck(lambda: dc.sum_all(dc.sigmoid(x) * x), [x])
        assert type(report.passed) is bool
        assert type(report.max_rel_error) is float
        assert all(type(v) is float for v in report.per_param.values())
        assert json.loads(json.dumps(report.to_dict()))["passed"] is True


class TestSoftmax:
    def test_rows_sum_to_one_property(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            rows, cols = rng.integers(1, 8, size=2)
            x = dc.Value(rng.normal(scale=rng.uniform(0.1, 50.0), size=(rows, cols)))
            s = dc.softmax_rows(x).data
            np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
            assert np.all(s >= 0)

    def test_large_logits_are_stable(self):
        s = dc.softmax_rows(dc.Value(np.array([[1000.0, 1000.0, -1000.0]]))).data
        np.testing.assert_allclose(s, [[0.5, 0.5, 0.0]])

    def test_masked_entries_are_exact_zero(self):
        mask = np.array([[True, False, True]])
        s = dc.softmax_rows(dc.Value(np.array([[0.3, 5.0, 0.1]])), mask).data
        assert s[0, 1] == 0.0
        assert s[0, [0, 2]].sum() == pytest.approx(1.0, abs=1e-15)

    def test_nan_input_raises(self):
        with pytest.raises(NonFinite):
            dc.softmax_rows(dc.Value(np.array([[np.nan, 1.0]])))


class TestNormalization:
    def test_l2_normalize_rejects_zero_row(self):
        with pytest.raises(ZeroVector):
            dc.l2_normalize_rows(dc.Value(np.array([[1.0, 0.0], [0.0, 0.0]])))

    def test_mean_pool_rejects_empty(self):
        with pytest.raises(EmptyInput):
            dc.mean_pool_nodes(dc.Value(np.zeros((0, 3))))

    def test_linear_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            dc.linear(_param(rng, 2, 3), _param(rng, 4, 2))


class TestBatchNorm:
    def test_training_output_is_standardized(self, rng):
        st = dc.BatchNormState.create(4)
        x = dc.Value(rng.normal(3.0, 2.0, size=(50, 4)))
        y = dc.batchnorm(x, st, dc.TRAINING).data
        np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=0), 1.0, rtol=1e-3)

    def test_running_stats_update_only_in_training(self, rng):
        st = dc.BatchNormState.create(3)
        x = dc.Value(rng.normal(5.0, 1.0, size=(20, 3)))
        dc.batchnorm(x, st, dc.TRAINING)
        after_train = st.running_mean.copy()
        assert np.all(after_train > 0.0)
        dc.batchnorm(x, st, dc.EVAL)
        np.testing.assert_array_equal(st.running_mean, after_train)

    def test_eval_uses_running_statistics(self):
        st = dc.BatchNormState.create(2, epsilon=1e-5)
        st.running_mean = np.array([1.0, -1.0])
        st.running_var = np.array([4.0, 1.0])
        y = dc.batchnorm(dc.Value(np.array([[3.0, 0.0]])), st, dc.EVAL).data
        np.testing.assert_allclose(y, [[2.0 / np.sqrt(4.0 + 1e-5), 1.0 / np.sqrt(1.0 + 1e-5)]])

    def test_single_row_training_is_degenerate(self):
        st = dc.BatchNormState.create(2)
        with pytest.raises(DegenerateBatch):
            dc.batchnorm(dc.Value(np.ones((1, 2))), st, dc.TRAINING)

    def test_masked_rows_do_not_affect_statistics(self, rng):
        st_a = dc.BatchNormState.create(3)
        st_b = dc.BatchNormState.create(3)
        real = rng.standard_normal((4, 3))
        padded = np.vstack([real, np.full((2, 3), 100.0)])
        mask = np.array([True] * 4 + [False] * 2)
        y_real = dc.batchnorm(dc.Value(real), st_a, dc.TRAINING).data
        y_pad = dc.batchnorm(dc.Value(padded), st_b, dc.TRAINING, row_mask=mask).data
        np.testing.assert_allclose(y_pad[:4], y_real, atol=1e-12)
        np.testing.assert_allclose(st_b.running_var, st_a.running_var, atol=1e-12)

    @pytest.mark.parametrize("mode", [dc.TRAINING, dc.EVAL])
    def test_gradcheck(self, rng, mode):
        st = dc.BatchNormState.create(3)
        st.running_mean = rng.standard_normal(3)
        x = _param(rng, 6, 3, name="x")
        w = dc.Value(rng.standard_normal((6, 3)))
        mask = np.array([True, True, False, True, True, False])
        report = dc.gradcheck(lambda: dc.sum_all(dc.batchnorm(x, st, mode, row_mask=mask) * w),
                              [x, st.gamma, st.beta])
        assert report.passed, report.to_dict()

    def test_masked_row_gradient_reaches_statistics_rows(self, rng):
        st = dc.BatchNormState.create(2)
        x = _param(rng, 4, 2, name="x")
        mask = np.array([True, True, True, False])
        upstream = np.zeros((4, 2))
        upstream[3] = 1.0
        w = dc.Value(upstream)
        report = dc.gradcheck(lambda: dc.sum_all(dc.batchnorm(x, st, dc.TRAINING, row_mask=mask) * w),
                              [x])
        assert report.passed, report.to_dict()
        x.zero_grad()
        dc.sum_all(dc.batchnorm(x, st, dc.TRAINING, row_mask=mask) * w).backward()
        assert np.all(np.abs(x.grad[:3]) > 0.0)
