import math

import numpy as np
import pytest

from bnncap import autodiff as ad
from bnncap.autodiff import GraphConsumedError, Tensor
from oracles import central_diff, grad_close, naive_conv2d, naive_matmul


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 5, 5))
        out = ad.conv2d(x, np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weight(self, rng):
        out = ad.conv2d(rng.normal(size=(2, 3, 6, 6)), np.zeros((4, 3, 3, 3)), padding=1)
        assert out.shape == (2, 4, 6, 6)
        assert not out.data.any()

    def test_matches_naive_oracle(self, rng):
        x = rng.normal(size=(1, 3, 4, 4))
        w = rng.normal(size=(2, 3, 3, 3))
        got = ad.conv2d(x, w, padding=1).data
        np.testing.assert_allclose(got, naive_conv2d(x, w, padding=1), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("shape,wshape,stride,padding", [
        ((2, 2, 7, 5), (3, 2, 3, 3), 2, 1),
        ((1, 4, 6, 6), (2, 4, 1, 1), 2, 0),
        ((3, 1, 5, 5), (2, 1, 5, 5), 1, 0),
        ((1, 2, 8, 8), (4, 2, 3, 3), 3, 2),
    ])
    def test_shapes_and_strides(self, rng, shape, wshape, stride, padding):
        x, w = rng.normal(size=shape), rng.normal(size=wshape)
        got = ad.conv2d(x, w, stride, padding).data
        want = naive_conv2d(x, w, stride, padding)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_channel_mismatch_names_dimensions(self, rng):
        with pytest.raises(ValueError, match="3 channels but weight expects 2"):
            ad.conv2d(rng.normal(size=(1, 3, 4, 4)), rng.normal(size=(1, 2, 3, 3)))

    def test_kernel_too_large(self, rng):
        with pytest.raises(ValueError, match="larger than padded input"):
            ad.conv2d(rng.normal(size=(1, 1, 2, 2)), rng.normal(size=(1, 1, 3, 3)))

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        probe = rng.normal(size=(2, 3, 3, 3))

        def f():
            return float((ad.conv2d(x.data, w.data, 2, 1).data * probe).sum())

        ad.backward(ad.sum_(ad.conv2d(x, w, 2, 1) * probe))
        for t in (x, w):
            ok, err = grad_close(t.grad, central_diff(f, t.data))
            assert ok, err


class TestLinear:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(ad.linear(x, np.eye(4), np.zeros(4)).data, x)

    def test_bias_only(self):
        b = np.array([1.0, -2.0, 3.0])
        out = ad.linear(np.ones((5, 2)), np.zeros((2, 3)), b).data
        np.testing.assert_array_equal(out, np.tile(b, (5, 1)))

    def test_matches_naive_matmul(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4))
        np.testing.assert_allclose(ad.linear(a, b).data, naive_matmul(a, b), atol=1e-14)

    def test_shape_error(self):
        with pytest.raises(ValueError, match="input has 3 features but weight expects 2"):
            ad.linear(np.ones((1, 3)), np.ones((2, 2)))


class TestBatchNorm:
    def test_standardized_batch_is_fixed_point(self):
        # zero mean, unit variance per channel; only the eps term moves it
        x = np.array([[1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, 1.0]])
        for eps, tol in ((1e-5, 1e-5), (1e-12, 1e-6)):
            out = ad.batch_norm(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), True, eps=eps).data
            np.testing.assert_allclose(out, x, rtol=tol, atol=0)

    def test_constant_channel_maps_to_beta(self):
        x = np.full((6, 1, 2, 2), 3.7)
        beta = np.array([0.25])
        out = ad.batch_norm(x, np.array([2.0]), beta, np.zeros(1), np.ones(1), True).data
        np.testing.assert_allclose(out, 0.25, atol=1e-12)

    def test_output_statistics(self, rng):
        x = 10.0 * rng.normal(size=(16, 3, 4, 4)) + 5.0
        gamma, beta = np.array([0.5, 1.5, 2.0]), np.array([-1.0, 0.0, 3.0])
        out = ad.batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), gamma ** 2, atol=1e-6)

    def test_running_stats_update(self, rng):
        x = rng.normal(size=(8, 2, 3, 3)) + 1.0
        rm, rv = np.zeros(2), np.ones(2)
        ad.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, True, momentum=0.1)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))

    def test_eval_uses_running_stats(self, rng):
        x = rng.normal(size=(4, 2))
        rm, rv = np.array([1.0, -1.0]), np.array([4.0, 9.0])
        out = ad.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, False, eps=0.0).data
        np.testing.assert_allclose(out, (x - rm) / np.sqrt(rv))

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty batch"):
            ad.batch_norm(np.zeros((0, 2, 3, 3)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), True)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="2 channels"):
            ad.batch_norm(np.zeros((3, 2)), np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), True)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, rng, training):
        x = Tensor(rng.normal(size=(5, 3, 2, 2)), requires_grad=True)
        g = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        probe = rng.normal(size=x.shape)
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, 3)

        def f():
            return float((ad.batch_norm(x.data, g.data, b.data, rm.copy(), rv.copy(), training).data * probe).sum())

        ad.backward(ad.sum_(ad.batch_norm(x, g, b, rm.copy(), rv.copy(), training) * probe))
        for t in (x, g, b):
            ok, err = grad_close(t.grad, central_diff(f, t.data))
            assert ok, err


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = ad.softmax_cross_entropy(np.zeros((3, 10)), [0, 4, 9])
        assert loss.item() == pytest.approx(math.log(10), abs=1e-12)

    def test_saturated(self):
        z = np.zeros((2, 5))
        z[0, 1] = z[1, 3] = 1000.0
        assert ad.softmax_cross_entropy(z, [1, 3]).item() == pytest.approx(0.0, abs=1e-12)

    def test_extended_precision_reference(self):
        mp = pytest.importorskip("mpmath")
        mp.mp.dps = 50
        z = np.random.default_rng(7).normal(size=(4, 10)) * 3
        y = np.array([3, 0, 9, 5])
        ref = sum(-(mp.mpf(z[i, y[i]]) - mp.log(sum(mp.e ** mp.mpf(v) for v in z[i]))) for i in range(4)) / 4
        assert float(ref) == pytest.approx(4.000178377816450, abs=1e-14)
        assert ad.softmax_cross_entropy(z, y).item() == pytest.approx(float(ref), abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match=r"\[0, 3\)"):
            ad.softmax_cross_entropy(np.zeros((1, 3)), [3])

    def test_gradient(self, rng):
        z = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        y = [0, 5, 2, 2]
        ad.backward(ad.softmax_cross_entropy(z, y))
        ok, err = grad_close(z.grad, central_diff(lambda: ad.softmax_cross_entropy(z.data, y).item(), z.data))
        assert ok, err


class TestBackward:
    def test_sum_gradient_is_one(self):
        w = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        grads = ad.backward(ad.sum_(w))
        np.testing.assert_array_equal(grads[w].data, 1.0)

    def test_square(self):
        w = Tensor(np.array(3.0), requires_grad=True)
        ad.backward(ad.sum_(w * w))
        assert w.grad == pytest.approx(6.0)

    def test_unused_leaf_gets_zero(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        grads = ad.backward(ad.sum_(a * 2.0), wrt=[a, b])
        np.testing.assert_array_equal(grads[b].data, np.zeros(3))

    def test_second_backward_raises(self):
        w = Tensor(np.ones(2), requires_grad=True)
        loss = ad.sum_(w * w)
        ad.backward(loss)
        with pytest.raises(GraphConsumedError):
            ad.backward(loss)

    def test_shared_subexpression_accumulates(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        y = w * w
        ad.backward(ad.sum_(y + y * 3.0))
        assert w.grad[0] == pytest.approx(16.0)

    def test_no_grad_records_nothing(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with ad.no_grad():
            out = w * 2.0
        assert out.is_leaf and not out.requires_grad

    def test_anomaly_detection(self):
        with ad.detect_anomaly(), pytest.raises(FloatingPointError, match="log"):
            with np.errstate(divide="ignore"):
                ad.log(Tensor(np.array([0.0])))

    def test_composite_graph_matches_finite_differences(self, rng):
        x = rng.normal(size=(3, 2, 6, 6))
        w1 = Tensor(rng.normal(size=(4, 2, 3, 3)) * 0.3, requires_grad=True)
        g1 = Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True)
        b1 = Tensor(rng.normal(size=4) * 0.1, requires_grad=True)
        wl = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        bl = Tensor(rng.normal(size=5), requires_grad=True)
        y = [1, 4, 0]

        def forward(train_stats=True):
            h = ad.conv2d(x, w1, 2, 1)
            h = ad.batch_norm(h, g1, b1, np.zeros(4), np.ones(4), True)
            h = ad.tanh(h) + ad.relu(h) * 0.5
            return ad.softmax_cross_entropy(ad.linear(ad.global_avg_pool(h), wl, bl), y)

        ad.backward(forward())
        for t in (w1, g1, b1, wl, bl):
            with ad.no_grad():
                numeric = central_diff(lambda: forward().item(), t.data)
            ok, err = grad_close(t.grad, numeric)
            assert ok, err

    @pytest.mark.parametrize("op", ["abs", "tanh", "log", "div", "clip", "where", "pow", "mean", "reshape"])
    def test_elementwise_rules(self, rng, op):
        a = Tensor(rng.uniform(0.2, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
        mask = rng.random((3, 4)) < 0.5
        probe = rng.normal(size=(3, 4))
        fns = {
            "abs": lambda: ad.abs_(a),
            "tanh": lambda: ad.tanh(a),
            "log": lambda: ad.log(b),
            "div": lambda: ad.div(a, b),
            "clip": lambda: ad.clip(a, -1.0, 1.0),
            "where": lambda: ad.where(mask, a, b * 2.0),
            "pow": lambda: ad.power(b, 3.0),
            "mean": lambda: ad.mean(a * b, axis=1, keepdims=True) * a,
            "reshape": lambda: ad.reshape(ad.reshape(a, (4, 3)) * 2.0, (3, 4)),
        }

        def loss():
            return ad.sum_(fns[op]() * probe)

        ad.backward(loss(), wrt=[a, b])
        for t in (a, b):
            with ad.no_grad():
                numeric = central_diff(lambda: loss().item(), t.data)
            ok, err = grad_close(t.grad, numeric)
            assert ok, (op, err)


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(4, 3, 8, 8))
    w = rng.normal(size=(5, 3, 3, 3))
    a = ad.conv2d(x, w, 1, 1).data
    b = ad.conv2d(x.copy(), w.copy(), 1, 1).data
    assert a.tobytes() == b.tobytes()
