import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pudprune import layers as L
from pudprune import tensor as T
from pudprune.errors import ConfigError, DataError, SizeError
from pudprune.tensor import Tensor
from pudprune.verify import finite_diff, naive_pool, softmax_reference


def dense_layer(w, b):
    return L.Dense(np.asarray(w, float), np.asarray(b, float))


class TestDense:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        out = L.dense_forward(dense_layer(np.eye(3), np.zeros(3)), Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weights(self):
        out = L.dense_forward(dense_layer(np.zeros((3, 2)), [1, 2]), Tensor(np.ones((5, 3))))
        np.testing.assert_array_equal(out.data, np.tile([1.0, 2.0], (5, 1)))

    def test_random_matches_composition(self):
        rng = np.random.default_rng(1)
        w, b, x = rng.normal(size=(6, 4)), rng.normal(size=4), rng.normal(size=(3, 6))
        ref = T.bias_add(T.matmul(Tensor(x), Tensor(w)), Tensor(b)).data
        np.testing.assert_allclose(L.dense_forward(dense_layer(w, b), Tensor(x)).data, ref,
                                   rtol=0, atol=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(SizeError):
            L.dense_forward(dense_layer(np.zeros((3, 2)), [0, 0]), Tensor(np.ones((1, 4))))


class TestScaledNorm:
    def test_eval_identity(self):
        layer = L.ScaledNorm(3, gamma=1.0)
        layer.mode = "eval"
        x = np.random.default_rng(2).normal(size=(2, 3, 4, 4))
        out = L.scalednorm_forward(layer, Tensor(x)).data
        np.testing.assert_allclose(out, x / np.sqrt(1 + layer.eps), rtol=1e-15)
        np.testing.assert_allclose(out, x, atol=1e-4)

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_zero_gamma_blocks_channel(self, mode):
        layer = L.ScaledNorm(3)
        layer.gamma = Tensor(np.array([0.5, 0.0, 0.5]), True)
        layer.beta = Tensor(np.array([0.0, 0.7, 0.0]), True)
        layer.mode = mode
        x = np.random.default_rng(3).normal(size=(4, 3, 5, 5)) * 10
        out = L.scalednorm_forward(layer, Tensor(x)).data
        assert np.all(out[:, 1] == 0.7)

    def test_train_statistics(self):
        layer = L.ScaledNorm(4, gamma=0.5)
        layer.gamma = Tensor(np.array([0.5, 1.0, 2.0, 0.1]), True)
        x = np.random.default_rng(4).normal(3.0, 10.0, size=(8, 4, 6, 6))
        out = L.scalednorm_forward(layer, Tensor(x)).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), layer.gamma.data ** 2, atol=1e-6)

    def test_running_stats_update(self):
        layer = L.ScaledNorm(2)
        x = np.random.default_rng(5).normal(2.0, 3.0, size=(5, 2, 3, 3))
        L.scalednorm_forward(layer, Tensor(x))
        m = x.mean(axis=(0, 2, 3))
        v = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(layer.running_mean, 0.1 * m, rtol=1e-12)
        np.testing.assert_allclose(layer.running_var, 0.9 + 0.1 * v, rtol=1e-12)
        assert np.all(layer.running_var >= 0)

    def test_eval_is_affine(self):
        layer = L.ScaledNorm(3)
        rng = np.random.default_rng(6)
        layer.running_mean, layer.running_var = rng.normal(size=3), rng.uniform(0.5, 2, 3)
        layer.mode = "eval"
        a, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
        f = lambda v: L.scalednorm_forward(layer, Tensor(v)).data
        np.testing.assert_allclose(f(2 * a + 3 * b) - f(np.zeros_like(a)),
                                   2 * (f(a) - f(np.zeros_like(a))) + 3 * (f(b) - f(np.zeros_like(a))),
                                   atol=1e-9)

    def test_channel_mismatch(self):
        with pytest.raises(SizeError):
            L.scalednorm_forward(L.ScaledNorm(3), Tensor(np.zeros((1, 2, 2, 2))))

    def test_empty_batch(self):
        with pytest.raises(DataError):
            L.scalednorm_forward(L.ScaledNorm(2), Tensor(np.zeros((0, 2, 2, 2))))


class TestPool:
    def test_avg_constant(self):
        out = L.pool_forward("avg", Tensor(np.full((1, 2, 4, 4), 0.3)), 2, 2)
        np.testing.assert_allclose(out.data, 0.3, rtol=1e-15)

    def test_max_hand_case(self):
        out = L.pool_forward("max", Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2, 2)
        assert out.item() == 4.0

    @pytest.mark.parametrize("kind", ["max", "avg"])
    @pytest.mark.parametrize("window,stride", [(2, 2), (3, 1), (2, 1), (3, 2)])
    def test_against_naive(self, kind, window, stride):
        x = np.random.default_rng(7).normal(size=(2, 3, 7, 6))
        out = L.pool_forward(kind, Tensor(x), window, stride).data
        np.testing.assert_allclose(out, naive_pool(x, kind, window, stride), rtol=0, atol=1e-12)

    def test_max_routes_to_first(self):
        x = Tensor(np.array([[[[5.0, 5.0], [1.0, 5.0]]]]), True)
        g = T.backward(T.reduce_sum(L.pool_forward("max", x, 2, 2))).of(x)
        np.testing.assert_array_equal(g, [[[[1, 0], [0, 0]]]])

    def test_window_too_large(self):
        with pytest.raises(SizeError):
            L.pool_forward("max", Tensor(np.zeros((1, 1, 2, 2))), 3, 1)


class TestSoftmaxTemperature:
    def test_equal_logits_uniform(self):
        out = L.softmax_temperature(Tensor(np.full((3, 5), 2.5)), 4.0).data
        np.testing.assert_allclose(out, 0.2, rtol=1e-15)

    def test_tau_one_is_softmax(self):
        z = np.random.default_rng(8).normal(size=(4, 6))
        ref = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(L.softmax_temperature(Tensor(z), 1.0).data, ref, rtol=1e-14)

    def test_extended_precision(self):
        out = L.softmax_temperature(Tensor([[2.0, 1.0, 0.0]]), 3.0).data[0]
        np.testing.assert_allclose(out, softmax_reference([2, 1, 0], 3.0), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_tau(self, tau):
        with pytest.raises(ConfigError):
            L.softmax_temperature(Tensor([[1.0, 2.0]]), tau)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.5, 1e3))
    def test_rows_sum_to_one(self, seed, mag):
        z = np.random.default_rng(seed).uniform(-mag, mag, size=(5, 10))
        out = L.softmax_temperature(Tensor(z), 3.0).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)

    def test_max_probability_nonincreasing_in_tau(self):
        z = Tensor(np.random.default_rng(9).normal(size=(6, 5)) * 3)
        taus = np.linspace(0.2, 20, 60)
        peaks = np.array([L.softmax_temperature(z, t).data.max(axis=1) for t in taus])
        assert np.all(np.diff(peaks, axis=0) <= 1e-15)


class TestLayerGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_conv_norm_relu_pool_dense(self, seed):
        rng = np.random.default_rng(seed)
        conv = L.Conv2d(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), 1, 1)
        norm = L.ScaledNorm(3)
        norm.gamma = Tensor(rng.normal(size=3), True)
        norm.beta = Tensor(rng.normal(size=3), True)
        dense = L.Dense(rng.normal(size=(12, 4)), rng.normal(size=4))
        x = Tensor(rng.normal(size=(3, 2, 4, 4)), True)

        def loss():
            h = L.scalednorm_forward(norm, conv.forward(x))
            h = L.pool_forward("avg", L.pool_forward("max", T.relu(h), 2, 2), 1, 1)
            out = L.dense_forward(dense, T.reshape(h, (3, 12)))
            return T.reduce_sum(T.mul(out, out))

        params = {"x": x, "w": conv.weight, "b": conv.bias, "gamma": norm.gamma,
                  "beta": norm.beta, "dw": dense.weight, "db": dense.bias}
        assert finite_diff(loss, params).passed(1e-4)

    def test_eval_norm_gradient(self):
        rng = np.random.default_rng(11)
        norm = L.ScaledNorm(2)
        norm.running_mean, norm.running_var = rng.normal(size=2), rng.uniform(0.5, 2, 2)
        norm.mode = "eval"
        x = Tensor(rng.normal(size=(2, 2, 3, 3)), True)
        loss = lambda: T.reduce_sum(T.exp(L.scalednorm_forward(norm, x)))
        assert finite_diff(loss, {"x": x, "g": norm.gamma, "b": norm.beta}).passed(1e-4)
