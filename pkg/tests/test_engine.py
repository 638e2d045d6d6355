import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowlite import engine as E
from flowlite.engine import ConvParams, ShapeError, Tensor


def conv_oracle(x, k, b, stride, pad):
    n, c, h, w = x.shape
    co, _, kh, kw = k.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b_, o, i, j in itertools.product(range(n), range(co), range(ho), range(wo)):
        acc = b[0, o, 0, 0]
        for ci, di, dj in itertools.product(range(c), range(kh), range(kw)):
            acc += xp[b_, ci, i * stride + di, j * stride + dj] * k[o, ci, di, dj]
        out[b_, o, i, j] = acc
    return out


def bilinear_oracle(img, x, y, border):
    h, w = img.shape
    if border:
        x = min(max(x, 0.0), w - 1.0)
        y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    total = 0.0
    for yy, xx, wt in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x0 + 1, fx * (1 - fy)),
                       (y0 + 1, x0, (1 - fx) * fy), (y0 + 1, x0 + 1, fx * fy)):
        if 0 <= yy < h and 0 <= xx < w:
            total += wt * img[yy, xx]
    return total


def rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


class TestTensor:
    def test_rank_four_enforced(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3)))

    def test_float32_storage(self):
        assert Tensor(np.ones((1, 1, 2, 2), dtype=np.float64)).data.dtype == np.float32

    def test_grad_of_sum_is_ones(self):
        x = Tensor(rand(np.random.default_rng(0), 1, 2, 3, 3), requires_grad=True)
        E.backward(E.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_grad_of_half_square_is_x(self):
        x = Tensor(rand(np.random.default_rng(1), 1, 2, 3, 3), requires_grad=True)
        E.backward(E.scale(E.sum_all(E.square(x)), 0.5))
        np.testing.assert_allclose(x.grad, x.data, rtol=1e-6)

    def test_backward_accumulates(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        loss = E.sum_all(E.scale(x, 3.0))
        E.backward(loss)
        E.backward(loss)
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 6.0))

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            E.backward(E.scale(x, 2.0))

    def test_shared_subexpression(self):
        x = Tensor(np.full((1, 1, 1, 1), 3.0), requires_grad=True)
        y = E.mul(x, x)
        E.backward(E.sum_all(E.add(y, y)))
        assert x.grad.item() == pytest.approx(12.0)

    def test_broadcast_gradient_reduces(self):
        x = Tensor(np.ones((2, 3, 4, 4)), requires_grad=True)
        b = Tensor(np.zeros((1, 3, 1, 1)), requires_grad=True)
        E.backward(E.sum_all(E.add(x, b)))
        np.testing.assert_array_equal(b.grad, np.full((1, 3, 1, 1), 32.0))


class TestElementwise:
    def test_leaky_relu_values(self):
        x = Tensor(np.array([2.0, -2.0]).reshape(1, 1, 1, 2))
        np.testing.assert_allclose(E.leaky_relu(x, 0.1).data.ravel(), [2.0, -0.2], rtol=1e-7)

    def test_leaky_relu_negative_slope_gradient(self):
        x = Tensor(np.full((1, 1, 1, 1), -1.0), requires_grad=True)
        E.backward(E.sum_all(E.leaky_relu(x, 0.1)))
        assert x.grad.item() == pytest.approx(0.1)

    def test_leaky_relu_rejects_bad_slope(self):
        with pytest.raises(ValueError):
            E.leaky_relu(Tensor(np.zeros((1, 1, 1, 1))), 1.5)

    def test_sigmoid_center_and_derivative(self):
        x = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
        y = E.sigmoid(x)
        assert y.item() == 0.5
        E.backward(E.sum_all(y))
        assert x.grad.item() == pytest.approx(0.25)

    def test_sigmoid_saturates_without_overflow(self):
        with np.errstate(over="raise", invalid="raise"):
            y = E.sigmoid(Tensor(np.array([40.0, -40.0, 200.0, -200.0]).reshape(1, 1, 2, 2))).data.ravel()
        assert abs(y[0] - 1.0) <= np.finfo(np.float32).eps
        assert 0.0 <= y[1] < 1e-16 and y[2] == 1.0 and y[3] >= 0.0

    @given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=16))
    def test_sigmoid_range(self, values):
        y = E.sigmoid(Tensor(np.array(values).reshape(1, 1, 1, -1))).data
        assert np.all((y >= 0) & (y <= 1))


class TestConv:
    def test_all_ones_counts_overlap(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        y = E.conv2d(x, ConvParams(np.ones((1, 1, 3, 3)), np.zeros((1, 1, 1, 1)), 1, 1)).data[0, 0]
        assert y[1, 1] == 9.0
        assert y[0, 0] == y[0, 2] == y[2, 0] == y[2, 2] == 4.0

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_identity_kernel_is_bit_exact(self, k):
        x = rand(np.random.default_rng(k), 2, 4, 7, 6)
        ker = np.zeros((4, 4, k, k), dtype=np.float32)
        for c in range(4):
            ker[c, c, k // 2, k // 2] = 1.0
        y = E.conv2d(Tensor(x), ConvParams(ker, np.zeros((1, 4, 1, 1)), 1, (k - 1) // 2))
        np.testing.assert_array_equal(y.data, x)

    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 3), (1, 2, 5), (2, 2, 5)])
    def test_matches_loop_oracle(self, stride, pad, k):
        rng = np.random.default_rng(stride * 10 + k)
        x, ker, b = rand(rng, 1, 3, 8, 8), rand(rng, 4, 3, k, k), rand(rng, 1, 4, 1, 1)
        y = E.conv2d(Tensor(x), ConvParams(ker, b, stride, pad)).data
        np.testing.assert_allclose(y, conv_oracle(x, ker, b, stride, pad), atol=1e-5)

    def test_output_size_formula(self):
        assert E.conv_output_size(8, 3, 2, 1) == 4
        assert E.conv_output_size(7, 3, 2, 1) == 4
        assert E.conv_output_size(5, 5, 1, 0) == 1

    def test_channel_mismatch_names_axis(self):
        p = ConvParams(np.zeros((2, 3, 3, 3)), np.zeros((1, 2, 1, 1)), 1, 1)
        with pytest.raises(ShapeError) as err:
            E.conv2d(Tensor(np.zeros((1, 4, 5, 5))), p)
        assert err.value.axis == "C"

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            ConvParams(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 1, 1)), 1, 0)

    def test_empty_output_rejected(self):
        p = ConvParams(np.zeros((1, 1, 5, 5)), np.zeros((1, 1, 1, 1)), 1, 0)
        with pytest.raises(ShapeError):
            E.conv2d(Tensor(np.zeros((1, 1, 3, 3))), p)

    def test_bias_gradient_counts_outputs(self):
        x = Tensor(rand(np.random.default_rng(3), 2, 2, 4, 4))
        p = ConvParams(Tensor(rand(np.random.default_rng(4), 3, 2, 3, 3)),
                       Tensor(np.zeros((1, 3, 1, 1)), requires_grad=True), 2, 1)
        E.backward(E.sum_all(E.conv2d(x, p)))
        np.testing.assert_array_equal(p.bias.grad, np.full((1, 3, 1, 1), 8.0))

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        x, ker = rand(rng, 1, 3, 8, 8), rand(rng, 4, 3, 3, 3)
        p = ConvParams(ker, np.zeros((1, 4, 1, 1)), 1, 1)
        np.testing.assert_array_equal(E.conv2d(Tensor(x), p).data, E.conv2d(Tensor(x), p).data)


class TestUpsample:
    def test_hand_evaluated_row(self):
        y = E.upsample2x(Tensor(np.array([0.0, 2.0]).reshape(1, 1, 1, 2))).data
        np.testing.assert_allclose(y.reshape(2, 4), [[0, 0.5, 1.5, 2]] * 2, atol=1e-7)

    @given(st.floats(-100, 100, allow_nan=False), st.integers(1, 5), st.integers(1, 5))
    @settings(max_examples=25)
    def test_constant_preserved(self, c, h, w):
        y = E.upsample2x(Tensor(np.full((1, 2, h, w), c))).data
        assert y.shape == (1, 2, 2 * h, 2 * w)
        np.testing.assert_allclose(y, np.float32(c), rtol=1e-6, atol=1e-6)
        assert y.sum() == pytest.approx(4 * 2 * h * w * np.float32(c), rel=1e-5, abs=1e-4)


class TestGridSample:
    def test_zero_offsets_identity(self):
        x = rand(np.random.default_rng(0), 1, 3, 5, 6)
        for mode in ("zeros", "border"):
            y = E.grid_sample(Tensor(x), Tensor(np.zeros((1, 2, 5, 6))), mode).data
            np.testing.assert_allclose(y, x, atol=1e-6)

    def test_integer_shift(self):
        x = rand(np.random.default_rng(1), 1, 2, 5, 6)
        off = np.zeros((1, 2, 5, 6), dtype=np.float32)
        off[:, 0] = 1.0
        y = E.grid_sample(Tensor(x), Tensor(off), "zeros").data
        np.testing.assert_array_equal(y[..., :-1], x[..., 1:])
        np.testing.assert_array_equal(y[..., -1], 0.0)

    @pytest.mark.parametrize("mode", ["zeros", "border"])
    def test_matches_scalar_oracle(self, mode):
        rng = np.random.default_rng(2)
        x = rand(rng, 2, 2, 5, 7)
        off = rng.uniform(-2.5, 2.5, size=(2, 2, 5, 7)).astype(np.float32)
        y = E.grid_sample(Tensor(x), Tensor(off), mode).data
        ref = np.zeros_like(y, dtype=np.float64)
        for n, c, i, j in itertools.product(range(2), range(2), range(5), range(7)):
            ref[n, c, i, j] = bilinear_oracle(x[n, c].astype(np.float64), j + float(off[n, 0, i, j]),
                                              i + float(off[n, 1, i, j]), mode == "border")
        np.testing.assert_allclose(y, ref, atol=1e-5)

    def test_offset_channel_count(self):
        with pytest.raises(ShapeError):
            E.grid_sample(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_unknown_padding(self):
        with pytest.raises(ValueError):
            E.grid_sample(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 2, 3, 3))), "reflect")


class TestStructural:
    def test_concat_and_split_are_inverse(self):
        rng = np.random.default_rng(0)
        a, b = Tensor(rand(rng, 1, 2, 3, 3)), Tensor(rand(rng, 1, 3, 3, 3))
        left, right = E.split_channels(E.concat([a, b]), [2, 3])
        np.testing.assert_array_equal(left.data, a.data)
        np.testing.assert_array_equal(right.data, b.data)

    def test_avg_pool(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(E.avg_pool2x(x)[0, 0], [[2.5, 4.5], [10.5, 12.5]])
