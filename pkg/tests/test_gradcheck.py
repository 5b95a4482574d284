"""Analytic gradients of every differentiable operator vs central finite
differences (float64, h=1e-5, relative error <= 1e-6)."""

import numpy as np
import pytest

from rsfnet import backend
from rsfnet import tensor as T
from rsfnet.tensor import Tensor
from conftest import check_gradients

TOL = 1e-6


def weighted_sum(out, rng):
    return T.tsum(T.mul(out, Tensor(rng.standard_normal(out.shape))))


class TestElementwiseGrads:
    def test_add_broadcast(self, rng):
        a = rng.standard_normal((3, 4, 5))
        b = rng.standard_normal((4, 1))
        check_gradients(lambda ts: T.tsum(T.mul(T.add(ts[0], ts[1]), ts[0])), [a, b], TOL)

    def test_mul_broadcast(self, rng):
        a = rng.standard_normal((3, 4, 5))
        b = rng.standard_normal((3, 1, 1))
        w = rng.standard_normal((3, 4, 5))
        check_gradients(lambda ts: T.tsum(T.mul(T.mul(ts[0], ts[1]), Tensor(w))), [a, b], TOL)

    def test_relu_away_from_kink(self, rng):
        x = rng.standard_normal((4, 4))
        x[np.abs(x) < 0.05] = 0.5
        w = rng.standard_normal((4, 4))
        check_gradients(lambda ts: T.tsum(T.mul(T.relu(ts[0]), Tensor(w))), [x], TOL)

    def test_sigmoid(self, rng):
        x = rng.standard_normal((3, 5))
        w = rng.standard_normal((3, 5))
        check_gradients(lambda ts: T.tsum(T.mul(T.sigmoid(ts[0]), Tensor(w))), [x], TOL)

    def test_log(self, rng):
        x = rng.uniform(0.2, 3.0, (4, 3))
        w = rng.standard_normal((4, 3))
        check_gradients(lambda ts: T.tsum(T.mul(T.log(ts[0]), Tensor(w))), [x], TOL)

    def test_log_with_floor(self, rng):
        x = rng.uniform(0.2, 1.0, (3, 3))
        check_gradients(lambda ts: T.tsum(T.log(ts[0], floor=1e-12)), [x], TOL)

    def test_smooth_l1_both_branches(self, rng):
        x = np.array([0.3, -0.7, 1.8, -2.5, 0.01])
        check_gradients(lambda ts: T.tsum(T.smooth_l1(ts[0])), [x], TOL)

    def test_neg_sub_div(self, rng):
        a = rng.standard_normal((3, 3))
        b = rng.standard_normal((3, 3))
        check_gradients(lambda ts: T.tsum(T.sub(T.neg(ts[0]), ts[1]) / 3.0), [a, b], TOL)

    def test_channel_softmax(self, rng):
        x = rng.standard_normal((2, 4, 3, 3))
        w = rng.standard_normal((2, 4, 3, 3))
        check_gradients(lambda ts: T.tsum(T.mul(T.channel_softmax(ts[0]), Tensor(w))), [x], TOL)


class TestShapeGrads:
    def test_reshape(self, rng):
        x = rng.standard_normal((2, 6))
        w = rng.standard_normal((3, 4))
        check_gradients(lambda ts: T.tsum(T.mul(T.reshape(ts[0], (3, 4)), Tensor(w))), [x], TOL)

    def test_concat_and_slice(self, rng):
        a = rng.standard_normal((2, 3, 3))
        b = rng.standard_normal((1, 3, 3))
        w = rng.standard_normal((2, 3, 3))

        def build(ts):
            cat = T.concat_channels([ts[0], ts[1]])
            return T.tsum(T.mul(T.slice_channels(cat, 1, 3), Tensor(w)))

        check_gradients(build, [a, b], TOL)

    def test_sum_axis_keepdims(self, rng):
        x = rng.standard_normal((2, 3, 4))
        w = rng.standard_normal((2, 1, 4))
        check_gradients(lambda ts: T.tsum(T.mul(T.tsum(ts[0], axis=1, keepdims=True), Tensor(w))), [x], TOL)

    def test_mean_axes(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        w = rng.standard_normal((2, 3))
        check_gradients(lambda ts: T.tsum(T.mul(T.tmean(ts[0], axis=(2, 3)), Tensor(w))), [x], TOL)

    def test_global_avg_pool(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        w = rng.standard_normal((2, 3))
        check_gradients(lambda ts: T.tsum(T.mul(T.global_avg_pool(ts[0]), Tensor(w))), [x], TOL)


class TestDenseConvGrads:
    def test_linear(self, rng):
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((2, 4))
        b = rng.standard_normal(2)
        r = rng.standard_normal((3, 2))
        check_gradients(lambda ts: T.tsum(T.mul(T.linear(ts[0], ts[1], ts[2]), Tensor(r))), [x, w, b], TOL)

    @pytest.mark.parametrize("name", ["numba", "numpy"])
    @pytest.mark.parametrize("stride,padding", [((1, 1), (1, 1)), ((2, 1), (0, 2)), ((2, 2), (1, 1))])
    def test_conv2d(self, rng, name, stride, padding, monkeypatch):
        monkeypatch.setattr(backend, "_active", backend.get_kernels(name))
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        r_holder = {}

        def build(ts):
            out = T.conv2d_raw(ts[0], ts[1], ts[2], stride, padding)
            if "r" not in r_holder:
                r_holder["r"] = np.random.default_rng(0).standard_normal(out.shape)
            return T.tsum(T.mul(out, Tensor(r_holder["r"])))

        check_gradients(build, [x, w, b], TOL)

    def test_conv1d_channel(self, rng):
        v = rng.standard_normal((3, 7))
        k = rng.standard_normal(5)
        r = rng.standard_normal((3, 7))
        check_gradients(lambda ts: T.tsum(T.mul(T.conv1d_channel(ts[0], ts[1]), Tensor(r))), [v, k], TOL)

    def test_bilinear_resize(self, rng):
        x = rng.standard_normal((1, 2, 3, 4))
        r = rng.standard_normal((1, 2, 7, 6))
        check_gradients(lambda ts: T.tsum(T.mul(T.bilinear_resize(ts[0], 7, 6), Tensor(r))), [x], TOL)


class TestBatchNormGrads:
    def test_training_mode(self, rng):
        x = rng.standard_normal((3, 2, 4, 4))
        gamma = rng.uniform(0.5, 1.5, 2)
        beta = rng.standard_normal(2)
        r = rng.standard_normal((3, 2, 4, 4))

        def build(ts):
            out = T.batch_norm_raw(ts[0], ts[1], ts[2], np.zeros(2), np.ones(2), 1e-3, 0.1, training=True)
            return T.tsum(T.mul(out, Tensor(r)))

        check_gradients(build, [x, gamma, beta], TOL)

    def test_inference_mode(self, rng):
        x = rng.standard_normal((2, 3, 3, 3))
        gamma = rng.uniform(0.5, 1.5, 3)
        beta = rng.standard_normal(3)
        rm = rng.standard_normal(3) * 0.3
        rv = rng.uniform(0.5, 2.0, 3)
        r = rng.standard_normal((2, 3, 3, 3))

        def build(ts):
            out = T.batch_norm_raw(ts[0], ts[1], ts[2], rm.copy(), rv.copy(), 1e-5, 0.1, training=False)
            return T.tsum(T.mul(out, Tensor(r)))

        check_gradients(build, [x, gamma, beta], TOL)
