import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsra import autodiff as ad
from fsra.autodiff import Tensor, backward, grad_check


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def rand64(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = t64(np.eye(2))
        b = t64([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, b.data)

    def test_zero_annihilates(self):
        z = t64(np.zeros((3, 4)))
        b = t64(np.arange(20.0).reshape(4, 5))
        np.testing.assert_array_equal(ad.matmul(z, b).data, np.zeros((3, 5)))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            ad.matmul(t64(np.zeros((2, 3))), t64(np.zeros((4, 2))))

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        b = rand64(rng, 3, 4)
        for _ in range(10):
            a = rand64(rng, 2, 3)
            res = grad_check(lambda x: ad.sum(ad.matmul(x, b)), a)
            assert res.passed, res

    def test_grad_batched_broadcast(self):
        rng = np.random.default_rng(1)
        a = rand64(rng, 2, 3, 4)
        b = rand64(rng, 4, 5)
        assert grad_check(lambda x: ad.sum(ad.matmul(a.detach(), x)), b).passed
        assert grad_check(lambda x: ad.sum(ad.matmul(x, b.detach())), a).passed


class TestSoftmax:
    def test_uniform(self):
        out = ad.softmax(t64([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-12)

    def test_large_inputs_stable(self):
        out = ad.softmax(t64([1000.0, 1000.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5])
        assert np.all(np.isfinite(out.data))

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        w = rng.standard_normal(5)
        for _ in range(10):
            x = rand64(rng, 5)
            res = grad_check(lambda t: ad.sum(ad.mul(ad.softmax(t, axis=0), t64(w))), x)
            assert res.passed, res

    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_sums_to_one(self, values):
        out = ad.softmax(t64(values), axis=0)
        assert abs(out.data.sum() - 1.0) <= 1e-9
        assert np.all(out.data >= 0)


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(t64([-1.0, 2.0])).data, [0.0, 2.0])

    def test_layer_norm_constant_vector_is_zero(self):
        out = ad.layer_norm(t64([[3.0, 3.0, 3.0, 3.0]]))
        np.testing.assert_allclose(out.data, np.zeros((1, 4)), atol=1e-9)

    def test_mean_grad(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            x = rand64(rng, 3, 4)
            res = grad_check(lambda t: ad.mean(ad.mul(t, t), axis=None), x)
            assert res.passed, res

    @pytest.mark.parametrize(
        "fn",
        [
            lambda x: ad.sum(ad.relu(x)),
            lambda x: ad.sum(ad.gelu(x)),
            lambda x: ad.sum(ad.exp(x)),
            lambda x: ad.sum(ad.mul(x, x)),
            lambda x: ad.sum(ad.variance(x, axis=0)),
            lambda x: ad.sum(ad.mean(x, axis=1)),
            lambda x: ad.sum(ad.mul(ad.layer_norm(x), Tensor(np.arange(8.0).reshape(2, 4)))),
            lambda x: ad.sum(ad.log_softmax(x, axis=1)),
            lambda x: ad.sum(ad.transpose(x)),
            lambda x: ad.sum(ad.reshape(x, (8,))),
            lambda x: ad.sum(x[1:, :1]),
            lambda x: ad.sum(ad.index_select(x, 0, [0, 1, 1])),
            lambda x: ad.sum(ad.concat([x, x], axis=1)),
        ],
    )
    def test_grad_matches_finite_differences(self, fn):
        rng = np.random.default_rng(4)
        for _ in range(10):
            x = Tensor(rng.standard_normal((2, 4)) + 0.1, requires_grad=True)
            res = grad_check(fn, x)
            assert res.passed, res

    def test_log_sqrt_grads_on_positive_inputs(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            x = Tensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True)
            assert grad_check(lambda t: ad.sum(ad.log(t)), x).passed
            assert grad_check(lambda t: ad.sum(ad.sqrt(t)), x).passed

    def test_div_grad(self):
        rng = np.random.default_rng(6)
        b = Tensor(rng.uniform(0.5, 2.0, (2, 3)), requires_grad=True)
        a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        assert grad_check(lambda t: ad.sum(ad.div(t, b.detach())), a).passed
        assert grad_check(lambda t: ad.sum(ad.div(a.detach(), t)), b).passed

    def test_gather_pairs_grad(self):
        rng = np.random.default_rng(7)
        x = rand64(rng, 4, 4)
        rows, cols = [0, 1, 2, 2], [3, 1, 0, 0]
        res = grad_check(lambda t: ad.sum(ad.gather_pairs(t, rows, cols)), x)
        assert res.passed, res

    def test_add_broadcast_grad(self):
        rng = np.random.default_rng(8)
        bias = rand64(rng, 4)
        x = rand64(rng, 3, 4)
        assert grad_check(lambda t: ad.sum(ad.mul(ad.add(x.detach(), t), ad.add(x.detach(), t))), bias).passed

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            ad.add(t64(np.zeros((2, 3))), t64(np.zeros((4, 5))))

    def test_advanced_indexing_rejected(self):
        x = t64(np.zeros((3, 3)), requires_grad=True)
        with pytest.raises(ValueError):
            x[np.array([0, 1])]


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = t64([[1.0, 2.0]], requires_grad=True)
        out = ad.dropout(x, 0.5, np.random.default_rng(0), training=False)
        assert out is x

    def test_deterministic_given_seed(self):
        x = Tensor(np.ones((100,)), requires_grad=True)
        a = ad.dropout(x, 0.3, np.random.default_rng(9), training=True)
        b = ad.dropout(x, 0.3, np.random.default_rng(9), training=True)
        np.testing.assert_array_equal(a.data, b.data)

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            ad.dropout(t64([1.0]), 1.0, np.random.default_rng(0))

    def test_mask_is_constant_for_grad(self):
        x = t64(np.ones(50), requires_grad=True)
        out = ad.dropout(x, 0.5, np.random.default_rng(3), training=True)
        backward(ad.sum(out))
        # gradient equals the mask itself
        assert set(np.unique(x.grad)) <= {0.0, 2.0}


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = t64([1.0, 2.0, 3.0], requires_grad=True)
        backward(ad.sum(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_elementwise_square(self):
        x = t64([1.0, 2.0], requires_grad=True)
        backward(ad.sum(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_composite_graph_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        w = Tensor(rng.standard_normal((4, 3)))
        for _ in range(10):
            x = rand64(rng, 2, 4)
            res = grad_check(lambda t: ad.mean(ad.gelu(ad.matmul(t, w))), x)
            assert res.passed, res

    def test_non_scalar_root_rejected(self):
        x = t64([1.0, 2.0], requires_grad=True)
        y = ad.mul(x, x)
        with pytest.raises(ValueError):
            backward(y)

    def test_second_backward_without_rerun_rejected(self):
        x = t64([1.0, 2.0], requires_grad=True)
        y = ad.sum(ad.mul(x, x))
        backward(y)
        with pytest.raises(ValueError):
            backward(y)

    def test_grad_accumulates_across_fanout(self):
        x = t64([3.0], requires_grad=True)
        y = ad.add(ad.mul(x, x), ad.mul(x, 2.0))
        backward(ad.sum(y))
        np.testing.assert_allclose(x.grad, [8.0])

    def test_all_reachable_tensors_get_grads(self):
        x = t64([1.0, -1.0], requires_grad=True)
        mid = ad.relu(x)
        out = ad.sum(mid)
        backward(out)
        assert x.grad is not None and mid.grad is not None and out.grad is not None


class TestGradCheck:
    def test_sum_passes_exactly(self):
        x = t64(np.random.default_rng(11).standard_normal(6), requires_grad=True)
        res = grad_check(ad.sum, x)
        assert res.passed and res.max_rel_error < 1e-9

    def test_softmax_cross_entropy_passes(self):
        rng = np.random.default_rng(12)
        onehot = np.zeros(4)
        onehot[2] = 1.0

        def f(logits):
            return ad.neg(ad.sum(ad.mul(ad.log_softmax(logits, axis=0), t64(onehot))))

        for _ in range(10):
            x = rand64(rng, 4)
            res = grad_check(f, x, tol=1e-4)
            assert res.passed, res

    def test_wrong_gradient_fails(self):
        def doubled_grad_op(x):
            return ad.apply_op(x.data.sum(), (x,), lambda g: (2.0 * np.ones_like(x.data) * g,))

        x = t64([1.0, 2.0], requires_grad=True)
        res = grad_check(doubled_grad_op, x)
        assert not res.passed

    def test_bad_eps_rejected(self):
        with pytest.raises(ValueError):
            grad_check(ad.sum, t64([1.0], requires_grad=True), eps=0.0)


class TestPurity:
    def test_ops_do_not_mutate_inputs(self):
        x = t64([[1.0, -2.0], [3.0, 4.0]], requires_grad=True)
        before = x.data.copy()
        ad.softmax(ad.relu(ad.mul(x, 3.0)), axis=1)
        np.testing.assert_array_equal(x.data, before)

    def test_same_seed_bit_identical(self):
        def run(seed):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.standard_normal((4, 4)).astype(np.float32), requires_grad=True)
            out = ad.dropout(ad.gelu(ad.matmul(x, x)), 0.2, np.random.default_rng(seed))
            return out.data.tobytes()

        assert run(123) == run(123)

    def test_no_grad_blocks_recording(self):
        ad.reset_tape()
        x = t64([1.0], requires_grad=True)
        with ad.no_grad():
            y = ad.mul(x, x)
        assert not y.requires_grad
        assert len(ad.active_tape().nodes) == 0
