"""Forward-operator contracts of the tensor engine, checked against
independent oracles (explicit loops and closed forms) where values are
not forced analytically.
"""

import numpy as np
import pytest

from rsfnet import backend
from rsfnet import tensor as T
from rsfnet.tensor import ShapeError, Tensor


def conv2d_loop_oracle(x, w, bias, stride, padding):
    """Direct quadruple-loop cross-correlation in float64."""
    n, c_in, h, wid = x.shape
    c_out, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wid + 2 * pw - kw) // sw + 1
    xp = np.pad(np.asarray(x, dtype=np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, c_out, oh, ow))
    for b in range(n):
        for co in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * sh : i * sh + kh, j * sw : j * sw + kw]
                    out[b, co, i, j] = float((patch * w[co]).sum())
    if bias is not None:
        out += np.asarray(bias)[None, :, None, None]
    return out


class TestConv2d:
    def test_scalar_affine(self):
        x = Tensor(np.array([[[[3.0]]]]))
        w = Tensor(np.array([[[[2.0]]]]))
        b = Tensor(np.array([1.0]))
        out = T.conv2d_raw(x, w, b, (1, 1), (0, 0))
        assert out.data.reshape(()) == pytest.approx(7.0)

    def test_identity_kernel_same_padding(self, rng):
        x = rng.standard_normal((1, 2, 5, 6))
        w = np.zeros((2, 2, 3, 3))
        w[0, 0, 1, 1] = 1.0
        w[1, 1, 1, 1] = 1.0
        out = T.conv2d_raw(Tensor(x), Tensor(w), None, (1, 1), (1, 1))
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((1, 1, 4, 4))
        w = rng.standard_normal((1, 1, 2, 2))
        out = T.conv2d_raw(Tensor(x), Tensor(w), None, (1, 1), (0, 0))
        expect = conv2d_loop_oracle(x, w, None, (1, 1), (0, 0))
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    @pytest.mark.parametrize("stride,padding", [((1, 1), (0, 0)), ((2, 1), (1, 2)), ((2, 2), (2, 2))])
    def test_strided_padded_vs_oracle(self, rng, stride, padding):
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 5))
        b = rng.standard_normal(4)
        out = T.conv2d_raw(Tensor(x), Tensor(w), Tensor(b), stride, padding)
        np.testing.assert_allclose(out.data, conv2d_loop_oracle(x, w, b, stride, padding), atol=1e-12)

    @pytest.mark.parametrize("name", ["numba", "numpy"])
    def test_backends_agree(self, rng, name):
        kern = backend.get_kernels(name)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((5, 3, 3, 3))
        got = kern.forward(x, w, (1, 1), (1, 1))
        np.testing.assert_allclose(got, conv2d_loop_oracle(x, w, None, (1, 1), (1, 1)), atol=1e-12)

    def test_channel_mismatch_names_dimension(self, rng):
        x = Tensor(rng.standard_normal((1, 3, 4, 4)))
        w = Tensor(rng.standard_normal((2, 4, 3, 3)))
        with pytest.raises(ShapeError, match="channels 3 != kernel in-channels 4"):
            T.conv2d_raw(x, w, None, (1, 1), (1, 1))

    def test_kernel_larger_than_padded_input(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)))
        w = Tensor(rng.standard_normal((1, 1, 5, 5)))
        with pytest.raises(ShapeError, match="smaller than kernel"):
            T.conv2d_raw(x, w, None, (1, 1), (0, 0))


class TestConv1dChannel:
    def test_size_one_kernel_is_identity(self, rng):
        v = rng.standard_normal((3, 6))
        out = T.conv1d_channel(Tensor(v), Tensor(np.array([1.0])))
        np.testing.assert_allclose(out.data, v, atol=1e-15)

    def test_boundary_scaling_with_zero_padding(self):
        v = np.full((1, 6), 3.0)
        out = T.conv1d_channel(Tensor(v), Tensor(np.array([1 / 3, 1 / 3, 1 / 3])))
        np.testing.assert_allclose(out.data[0, 1:-1], 3.0, atol=1e-12)
        np.testing.assert_allclose(out.data[0, [0, -1]], 2.0, atol=1e-12)

    def test_matches_loop_oracle(self, rng):
        v = rng.standard_normal((2, 8))
        k = rng.standard_normal(3)
        out = T.conv1d_channel(Tensor(v), Tensor(k))
        expect = np.zeros_like(v)
        for n in range(2):
            for c in range(8):
                for j in range(3):
                    src = c + j - 1
                    if 0 <= src < 8:
                        expect[n, c] += v[n, src] * k[j]
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ShapeError, match="odd"):
            T.conv1d_channel(Tensor(rng.standard_normal((1, 4))), Tensor(np.ones(2)))


class TestGlobalAvgPool:
    def test_constant_plane(self):
        x = np.full((1, 2, 3, 3), 0.0)
        x[0, 0] = 4.5
        x[0, 1] = -1.25
        out = T.global_avg_pool(Tensor(x))
        np.testing.assert_allclose(out.data, [[4.5, -1.25]])

    def test_direct_mean(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        assert T.global_avg_pool(Tensor(x)).data.reshape(()) == pytest.approx(2.5)

    def test_zero_plane(self):
        assert T.global_avg_pool(Tensor(np.zeros((1, 1, 4, 4)))).data.reshape(()) == 0.0

    def test_within_min_max(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        out = T.global_avg_pool(Tensor(x)).data
        assert (out >= x.min() - 1e-12).all() and (out <= x.max() + 1e-12).all()


def bilinear_oracle(x, oh, ow):
    """Closed-form half-pixel-center interpolation, explicit per pixel."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, oh, ow))
    for i in range(oh):
        for j in range(ow):
            sy = min(max((i + 0.5) * h / oh - 0.5, 0.0), h - 1.0)
            sx = min(max((j + 0.5) * w / ow - 0.5, 0.0), w - 1.0)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            dy, dx = sy - y0, sx - x0
            out[:, :, i, j] = (
                x[:, :, y0, x0] * (1 - dy) * (1 - dx)
                + x[:, :, y0, x1] * (1 - dy) * dx
                + x[:, :, y1, x0] * dy * (1 - dx)
                + x[:, :, y1, x1] * dy * dx
            )
    return out


class TestBilinearResize:
    def test_single_pixel_broadcast(self):
        out = T.bilinear_resize(Tensor(np.full((1, 1, 1, 1), 7.25)), 3, 5)
        np.testing.assert_allclose(out.data, 7.25)

    def test_same_size_identity(self, rng):
        x = rng.standard_normal((1, 2, 4, 6))
        out = T.bilinear_resize(Tensor(x), 4, 6)
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_2x2_to_4x4_matches_oracle(self, rng):
        x = rng.standard_normal((1, 1, 2, 2))
        out = T.bilinear_resize(Tensor(x), 4, 4)
        np.testing.assert_allclose(out.data, bilinear_oracle(x, 4, 4), atol=1e-12)

    @pytest.mark.parametrize("oh,ow", [(3, 7), (9, 2), (5, 5)])
    def test_random_sizes_vs_oracle(self, rng, oh, ow):
        x = rng.standard_normal((2, 3, 4, 6))
        out = T.bilinear_resize(Tensor(x), oh, ow)
        np.testing.assert_allclose(out.data, bilinear_oracle(x, oh, ow), atol=1e-12)

    def test_bounded_by_input_range(self, rng):
        x = rng.standard_normal((1, 1, 3, 3))
        out = T.bilinear_resize(Tensor(x), 8, 8).data
        assert out.min() >= x.min() - 1e-12 and out.max() <= x.max() + 1e-12


class TestBatchNorm:
    def test_inference_identity_stats(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        out = T.batch_norm_raw(
            Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
            np.zeros(3), np.ones(3), 0.0, 0.1, training=False,
        )
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_hand_evaluated_normalization(self):
        out = T.batch_norm_raw(
            Tensor(np.full((1, 1, 1, 1), 3.0)), Tensor(np.array([2.0])), Tensor(np.array([1.0])),
            np.array([1.0]), np.array([4.0]), 0.0, 0.1, training=False,
        )
        assert out.data.reshape(()) == pytest.approx(3.0)

    def test_training_constant_batch_outputs_beta(self):
        beta = np.array([0.25, -0.5])
        rm, rv = np.zeros(2), np.ones(2)
        out = T.batch_norm_raw(
            Tensor(np.full((3, 2, 4, 4), 9.0)), Tensor(np.ones(2)), Tensor(beta),
            rm, rv, 1e-5, 0.1, training=True,
        )
        np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None, None], (3, 2, 4, 4)), atol=1e-6)

    def test_training_updates_running_stats(self, rng):
        x = rng.standard_normal((4, 2, 3, 3))
        rm, rv = np.zeros(2), np.ones(2)
        T.batch_norm_raw(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, 1e-5, 0.5, training=True)
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        np.testing.assert_allclose(rm, 0.5 * mean, rtol=1e-10)
        np.testing.assert_allclose(rv, 0.5 + 0.5 * var, rtol=1e-6)


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert T.sigmoid(Tensor(np.zeros(1))).data[0] == pytest.approx(0.5)

    def test_sigmoid_extremes_stable(self):
        out = T.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
        assert out[0] == 0.0 and out[1] == 1.0

    def test_relu(self):
        out = T.relu(Tensor(np.array([-2.0, 0.0, 3.0]))).data
        np.testing.assert_allclose(out, [0.0, 0.0, 3.0])

    def test_concat_ordered_blocks(self, rng):
        a = rng.standard_normal((2, 4, 4))
        b = rng.standard_normal((3, 4, 4))
        out = T.concat_channels([Tensor(a), Tensor(b)])
        assert out.shape == (5, 4, 4)
        np.testing.assert_allclose(out.data[:2], a)
        np.testing.assert_allclose(out.data[2:], b)

    def test_concat_then_slice_recovers_exactly(self, rng):
        a = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        b = rng.standard_normal((1, 5, 3, 3)).astype(np.float32)
        cat = T.concat_channels([Tensor(a), Tensor(b)])
        assert np.array_equal(T.slice_channels(cat, 0, 2).data, a)
        assert np.array_equal(T.slice_channels(cat, 2, 7).data, b)

    def test_broadcast_channel_scale(self, rng):
        x = rng.standard_normal((3, 4, 5))
        s = rng.standard_normal((3, 1, 1))
        np.testing.assert_allclose(T.mul(Tensor(x), Tensor(s)).data, x * s)

    def test_incompatible_shapes_raise(self):
        with pytest.raises(ShapeError, match="broadcast"):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_concat_extent_mismatch(self):
        with pytest.raises(ShapeError, match="extents differ"):
            T.concat_channels([Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((2, 4, 3)))])

    def test_channel_softmax_normalizes(self, rng):
        x = rng.standard_normal((2, 5, 3, 3))
        s = T.channel_softmax(Tensor(x)).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
        assert (s > 0).all()

    def test_smooth_l1_values(self):
        out = T.smooth_l1(Tensor(np.array([0.0, 0.5, 1.0, -2.0]))).data
        np.testing.assert_allclose(out, [0.0, 0.125, 0.5, 1.5])


class TestBackward:
    def test_sigmoid_derivative_at_zero(self):
        x = Tensor(np.zeros(1), tracked=True)
        T.sigmoid(x).backward()
        assert x.grad[0] == pytest.approx(0.25)

    def test_relu_derivative_negative(self):
        x = Tensor(np.array([-1.0]), tracked=True)
        T.relu(x).backward()
        assert x.grad[0] == 0.0

    def test_relu_subgradient_zero_at_zero(self):
        x = Tensor(np.array([0.0]), tracked=True)
        T.relu(x).backward()
        assert x.grad[0] == 0.0

    def test_non_scalar_rejected(self, rng):
        x = Tensor(rng.standard_normal(3), tracked=True)
        with pytest.raises(ValueError, match="scalar"):
            T.relu(x).backward()

    def test_untracked_rejected(self):
        with pytest.raises(ValueError, match="untracked"):
            Tensor(np.zeros(1)).backward()

    def test_grad_accumulates_across_uses(self):
        x = Tensor(np.array([2.0]), tracked=True)
        y = T.add(T.mul(x, x), x)  # x^2 + x -> 2x + 1 = 5
        y.backward()
        assert x.grad[0] == pytest.approx(5.0)

    def test_no_grad_blocks_graph(self):
        x = Tensor(np.array([1.0]), tracked=True)
        with T.no_grad():
            y = T.sigmoid(x)
        assert not y.tracked


class TestDeterminism:
    @pytest.mark.parametrize("name", ["numba", "numpy"])
    def test_conv_pipeline_bit_identical(self, rng, name):
        kern = backend.get_kernels(name)
        x = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 4, 3, 3)).astype(np.float32)
        a = kern.forward(x, w, (1, 1), (1, 1))
        b = kern.forward(x, w, (1, 1), (1, 1))
        assert np.array_equal(a, b)
