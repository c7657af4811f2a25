import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bnncap import autodiff as ad
from bnncap.autodiff import Tensor
from bnncap.quant import (
    LayerWeights, QuantConfig, binarize, binarize_ste, quantize_activation,
    quantize_activation_ste, ste_grad, tanh_surrogate,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(1, 64), elements=finite)


class TestBinarize:
    def test_zero_maps_to_plus_one(self):
        np.testing.assert_array_equal(binarize([0.3, -0.7, 0.0]), [1.0, -1.0, 1.0])

    def test_negative_zero_maps_to_plus_one(self):
        assert binarize(np.array([-0.0]))[0] == 1.0

    def test_all_negative(self):
        assert (binarize(-np.arange(1.0, 6.0)) == -1).all()

    def test_nan_rejected(self):
        with pytest.raises(ValueError, match="NaN"):
            binarize([1.0, np.nan])

    @given(vectors)
    def test_codomain_shape_idempotence(self, w):
        b = binarize(w)
        assert b.shape == w.shape
        assert set(np.unique(b)) <= {-1.0, 1.0}
        np.testing.assert_array_equal(binarize(b), b)


class TestSurrogate:
    def test_saturates(self):
        assert tanh_surrogate(np.array([0.01]), 5)[0] == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("k", [0, 1, 5])
    def test_zero(self, k):
        assert tanh_surrogate(np.zeros(3), k).tolist() == [0.0, 0.0, 0.0]

    @given(vectors, st.integers(0, 6))
    def test_odd(self, w, k):
        np.testing.assert_array_equal(tanh_surrogate(-w, k), -tanh_surrogate(w, k))

    def test_bound_above_magnitude_floor(self):
        rng = np.random.default_rng(0)
        w = rng.uniform(1e-4, 1.0, 10000) * rng.choice([-1, 1], 10000)
        w[:2] = [1e-4, -1e-4]
        assert np.abs(binarize(w) - tanh_surrogate(w, 5)).max() < 1e-8

    def test_bound_fails_near_zero(self):
        # documented: the bound cannot hold arbitrarily close to 0
        assert abs(binarize([1e-7])[0] - tanh_surrogate(np.array([1e-7]), 5)[0]) > 0.9

    def test_derivative(self):
        w = Tensor(np.array([0.3, -0.1, 0.0]), requires_grad=True)
        ad.backward(ad.sum_(ad.tanh(w * 10.0)))
        np.testing.assert_allclose(w.grad, 10.0 * (1 - np.tanh(10.0 * w.data) ** 2))


class TestSTE:
    def test_identity_inside_clip(self):
        rng = np.random.default_rng(1)
        up = rng.normal(size=20)
        np.testing.assert_array_equal(ste_grad(up, rng.uniform(-1, 1, 20)), up)

    def test_clipped_element(self):
        assert ste_grad(np.array([2.0, 3.0]), np.array([1.5, 0.2]), 1.0).tolist() == [0.0, 3.0]

    def test_random_mix_matches_indicator(self):
        rng = np.random.default_rng(2)
        up, m = rng.normal(size=100), rng.uniform(-2, 2, 100)
        np.testing.assert_array_equal(ste_grad(up, m, 1.0), up * (np.abs(m) <= 1.0))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ste_grad(np.zeros(2), np.zeros(3))

    def test_binarize_ste_routes_through_clip(self):
        m = Tensor(np.array([0.5, -1.5, -0.2]), requires_grad=True)
        out = binarize_ste(m, clip=1.0)
        np.testing.assert_array_equal(out.data, [1.0, -1.0, -1.0])
        ad.backward(ad.sum_(out * np.array([2.0, 3.0, 4.0])))
        np.testing.assert_array_equal(m.grad, [2.0, 0.0, 4.0])

    def test_scaled_binarization(self):
        m = Tensor(np.array([0.5, -0.1]), requires_grad=True)
        np.testing.assert_allclose(binarize_ste(m, scale=True).data, [0.3, -0.3])


class TestActivationQuant:
    def test_endpoints(self):
        assert quantize_activation(np.array([0.0, 1.0]), 4).tolist() == [0.0, 1.0]

    def test_half_rounds_away_from_zero(self):
        assert quantize_activation(np.array([0.5]), 4)[0] == pytest.approx(8 / 15, abs=1e-15)

    def test_exact_tie(self):
        # 7.5 / 15 is exactly representable; ties go up
        assert quantize_activation(np.array([0.5]), 4)[0] * 15 == 8.0
        assert quantize_activation(np.array([0.25]), 1)[0] == 0.0
        assert quantize_activation(np.array([0.5]), 1)[0] == 1.0

    def test_clamping(self):
        assert quantize_activation(np.array([-3.0, 7.0]), 2).tolist() == [0.0, 1.0]

    def test_bits_validation(self):
        with pytest.raises(ValueError):
            quantize_activation(np.zeros(1), 0)

    @given(vectors, st.integers(1, 8))
    def test_codomain_idempotent_monotone(self, x, bits):
        q = quantize_activation(x, bits)
        assert len(np.unique(q)) <= 2 ** bits
        assert ((q >= 0) & (q <= 1)).all()
        np.testing.assert_array_equal(quantize_activation(q, bits), q)
        order = np.argsort(x, kind="stable")
        assert (np.diff(q[order]) >= 0).all()

    def test_ste_backward(self):
        x = Tensor(np.array([-0.5, 0.0, 0.3, 1.0, 1.2]), requires_grad=True)
        ad.backward(ad.sum_(quantize_activation_ste(x, 4)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0, 1.0, 0.0])


class TestConfig:
    def test_defaults(self):
        cfg = QuantConfig()
        assert (cfg.activation_bits, cfg.k, cfg.ste_clip, cfg.per_layer_scale) == (4, 5, 1.0, False)

    @pytest.mark.parametrize("kw", [{"activation_bits": 0}, {"k": -1}, {"ste_clip": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            QuantConfig(**kw)

    def test_layer_weights_views(self):
        lw = LayerWeights(Tensor(np.array([0.2, -0.3, 0.0])), k=5)
        np.testing.assert_array_equal(lw.binary, [1, -1, 1])
        np.testing.assert_array_equal(lw.surrogate, np.tanh(1e5 * lw.master.data))


@settings(max_examples=25)
@given(arrays(np.float64, st.integers(1, 32), elements=st.floats(-1, 1)))
def test_surrogate_in_closed_interval(w):
    s = tanh_surrogate(w, 5)
    assert (np.abs(s) <= 1).all()
