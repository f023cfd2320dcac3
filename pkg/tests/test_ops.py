"""Tensor-core kernels: values against naive-loop oracles, gradients
against central differences."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from tridet import ops


def naive_conv2d(x, w, b, stride=1, padding=0):
    n, cin, h, ww = x.shape
    cout, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (ww + 2 * padding - kw) // stride + 1
    xp = np.zeros((n, cin, h + 2 * padding, ww + 2 * padding))
    xp[:, :, padding: padding + h, padding: padding + ww] = x
    out = np.zeros((n, cout, oh, ow))
    for ni in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[ni, ci, i * stride + u, j * stride + v] \
                                    * w[co, ci, u, v]
                    out[ni, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


class TestConv2d:
    def test_identity_1x1(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 4, 5, 5))
        w = np.eye(4).reshape(4, 4, 1, 1)
        assert_allclose(ops.conv2d(x, w, np.zeros(4)), x)

    def test_constant_field_all_ones_kernel(self):
        x = np.full((1, 1, 6, 6), 3.0)
        w = np.ones((1, 1, 3, 3))
        y = ops.conv2d(x, w, None, padding=1)
        assert_allclose(y[0, 0, 1:-1, 1:-1], 27.0)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        assert_allclose(ops.conv2d(x, w, b, stride=2, padding=1),
                        naive_conv2d(x, w, b, stride=2, padding=1),
                        atol=1e-12)

    def test_input_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((2, 3, 3, 3))
        r = rng.standard_normal(ops.conv2d(x, w, None, padding=1).shape)
        gx, _, _ = ops.conv2d_backward(x, w, r, padding=1, with_bias=False)
        fd = ops.finite_diff_grad(
            lambda v: (ops.conv2d(v, w, None, padding=1) * r).sum(), x)
        assert ops.relative_error(gx, fd) < 1e-6

    def test_depthwise_identity(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 6, 4, 4))
        w = np.ones((6, 1, 1, 1))
        y = ops.conv2d(x, w, None, groups=6)
        assert_allclose(y, x)

    def test_shape_error_names_dimension(self):
        x = np.zeros((1, 3, 5, 5))
        w = np.zeros((4, 2, 3, 3))
        with pytest.raises(ops.ShapeError):
            ops.conv2d(x, w, None)


class TestFullyConnected:
    def test_identity(self):
        x = np.arange(5.0)
        assert_allclose(ops.fully_connected(x, np.eye(5), np.zeros(5)), x)

    def test_zero_matrix_gives_bias(self):
        b = np.array([1.0, -2.0])
        assert_allclose(ops.fully_connected(np.ones(3), np.zeros((2, 3)), b), b)

    def test_gradcheck(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(8)
        w = rng.standard_normal((4, 8))
        b = rng.standard_normal(4)
        r = rng.standard_normal(4)
        gx, gw, gb = ops.fully_connected_backward(x, w, r)
        fd = ops.finite_diff_grad(
            lambda v: (ops.fully_connected(v, w, b) * r).sum(), x)
        assert ops.relative_error(gx, fd) < 1e-6
        fdw = ops.finite_diff_grad(
            lambda v: (ops.fully_connected(x, v, b) * r).sum(), w)
        assert ops.relative_error(gw, fdw) < 1e-6


class TestMaxPool:
    def test_constant_input(self):
        x = np.full((1, 2, 5, 5), 1.5)
        assert_allclose(ops.max_pool2d(x, 3), x)

    def test_spike_spreads_to_3x3_block(self):
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2, 2] = 5.0
        y = ops.max_pool2d(x, 3)
        assert_allclose(y[0, 0, 1:4, 1:4], 5.0)
        assert y[0, 0, 0, 0] == 0.0

    def test_matches_window_scan(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 1, 7, 7))
        y = ops.max_pool2d(x, 5)
        for i in range(7):
            for j in range(7):
                win = x[0, 0, max(0, i - 2): i + 3, max(0, j - 2): j + 3]
                assert y[0, 0, i, j] == win.max()

    def test_even_kernel_rejected(self):
        with pytest.raises(ops.ShapeError):
            ops.max_pool2d(np.zeros((1, 1, 4, 4)), 4)


class TestPooling:
    def test_global_avg_constant(self):
        x = np.full((1, 2, 3, 3), 4.0)
        assert_allclose(ops.global_avg_pool(x, (2, 3)), 4.0)

    def test_global_avg_known_value(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        assert_allclose(ops.global_avg_pool(x, (2, 3)), [[[[2.5]]]])

    def test_global_avg_gradient(self):
        x = np.zeros((1, 1, 4, 4))
        g = ops.global_avg_pool_backward(x, (2, 3), np.ones((1, 1, 1, 1)))
        assert_allclose(g, 1.0 / 16)

    def test_empty_axis_set_rejected(self):
        with pytest.raises(ops.ShapeError):
            ops.global_avg_pool(np.zeros((1, 1, 2, 2)), ())

    def test_directional_pool_hand_values(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        q_h, q_w = ops.directional_pool(x)
        assert_allclose(q_h[0, 0, :, 0], [1.5, 3.5])
        assert_allclose(q_w[0, 0, 0, :], [2.0, 3.0])

    def test_directional_pool_constant(self):
        x = np.full((1, 3, 4, 5), 2.0)
        q_h, q_w = ops.directional_pool(x)
        assert_allclose(q_h, 2.0)
        assert_allclose(q_w, 2.0)

    def test_directional_pool_matches_naive_loop(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 3, 4, 5))
        q_h, q_w = ops.directional_pool(x)
        for c in range(3):
            for i in range(4):
                assert_allclose(q_h[0, c, i, 0],
                                sum(x[0, c, i, j] for j in range(5)) / 5)
            for j in range(5):
                assert_allclose(q_w[0, c, 0, j],
                                sum(x[0, c, i, j] for i in range(4)) / 4)


class TestBilinearSample:
    def test_integer_coordinates_exact(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 1, 4, 4))
        assert ops.bilinear_sample(x, 0, 0, 2.0, 3.0) == x[0, 0, 2, 3]

    def test_four_point_average(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        assert_allclose(ops.bilinear_sample(x, 0, 0, 0.5, 0.5), 2.5)

    def test_out_of_bounds_zero(self):
        x = np.ones((1, 1, 2, 2))
        assert ops.bilinear_sample(x, 0, 0, -1.0, -1.0) == 0.0

    def test_nan_coordinates_rejected(self):
        with pytest.raises(ValueError):
            ops.bilinear_sample(np.ones((1, 1, 2, 2)), 0, 0, np.nan, 0.0)

    def test_grid_sample_gradients(self):
        rng = np.random.default_rng(8)
        plane = rng.standard_normal((2, 4, 4))
        ys = rng.uniform(0.3, 2.6, (3, 3))
        xs = rng.uniform(0.3, 2.6, (3, 3))
        r = rng.standard_normal((2, 3, 3))
        gp, gy, gx = ops.grid_sample_zero_backward(plane, ys, xs, r)
        fd = ops.finite_diff_grad(
            lambda v: (ops.grid_sample_zero(v, ys, xs) * r).sum(), plane)
        assert ops.relative_error(gp, fd) < 1e-6
        fdy = ops.finite_diff_grad(
            lambda v: (ops.grid_sample_zero(plane, v, xs) * r).sum(), ys)
        assert ops.relative_error(gy, fdy) < 1e-6


class TestActivations:
    def test_hard_sigmoid_formula_points(self):
        x = np.array([0.0, 1.0, -1.0, 0.5])
        assert_allclose(ops.hard_sigmoid(x), [0.5, 1.0, 0.0, 0.75])

    def test_relu_points(self):
        assert ops.activation("relu", np.array(-2.0)) == 0.0
        assert ops.activation("relu", np.array(3.0)) == 3.0

    def test_sigmoid_zero(self):
        assert ops.sigmoid(np.array(0.0)) == 0.5

    def test_gradcheck_away_from_kinks(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal(20) * 2
        x = x[np.abs(np.abs(x) - 1.0) > 1e-3]
        x = x[np.abs(x) > 1e-3]
        for kind in ops.ACTIVATIONS:
            r = np.random.default_rng(10).standard_normal(x.shape)
            g = ops.activation_backward(kind, x, r)
            fd = ops.finite_diff_grad(
                lambda v, k=kind: (ops.activation(k, v) * r).sum(), x.copy())
            assert ops.relative_error(g, fd) < 1e-6, kind

    def test_ranges_and_monotonicity(self):
        x = np.sort(np.random.default_rng(11).standard_normal(100) * 3)
        hs = ops.hard_sigmoid(x)
        sg = ops.sigmoid(x)
        assert hs.min() >= 0.0 and hs.max() <= 1.0
        assert sg.min() > 0.0 and sg.max() < 1.0
        assert (np.diff(hs) >= 0).all()
        assert (np.diff(sg) >= 0).all()


class TestBatchNorm:
    def test_identity_statistics(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((1, 3, 2, 2))
        y = ops.batchnorm_inference(x, np.ones(3), np.zeros(3),
                                    np.zeros(3), np.ones(3))
        assert_allclose(y, x, rtol=1e-5, atol=1e-5)

    def test_zero_scale_gives_shift(self):
        x = np.random.default_rng(13).standard_normal((1, 2, 3, 3))
        shift = np.array([0.5, -0.5])
        y = ops.batchnorm_inference(x, np.zeros(2), shift,
                                    np.zeros(2), np.ones(2))
        assert_allclose(y[0, 0], 0.5)
        assert_allclose(y[0, 1], -0.5)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((2, 3, 2, 2))
        scale, shift, mean = (rng.standard_normal(3) for _ in range(3))
        var = rng.uniform(0.5, 2.0, 3)
        y = ops.batchnorm_inference(x, scale, shift, mean, var)
        for n in range(2):
            for c in range(3):
                for i in range(2):
                    for j in range(2):
                        ref = (x[n, c, i, j] - mean[c]) / np.sqrt(var[c] + 1e-5) \
                            * scale[c] + shift[c]
                        assert_allclose(y[n, c, i, j], ref)

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            ops.batchnorm_inference(np.zeros((1, 1, 2, 2)), np.ones(1),
                                    np.zeros(1), np.zeros(1), np.array([-1.0]))


class TestConcatSplit:
    def test_round_trip(self):
        rng = np.random.default_rng(15)
        a = rng.standard_normal((1, 2, 3, 3))
        b = rng.standard_normal((1, 5, 3, 3))
        parts = ops.split_axis(ops.concat_axis([a, b], 1), 1, [2, 5])
        assert (parts[0] == a).all() and (parts[1] == b).all()

    def test_channel_doubling(self):
        a = np.zeros((1, 4, 2, 2))
        assert ops.concat_axis([a, a], 1).shape == (1, 8, 2, 2)

    def test_gradient_routes_slices(self):
        rng = np.random.default_rng(16)
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((2, 4))
        gy = rng.standard_normal((2, 7))
        ga, gb = ops.concat_axis_backward([a, b], 1, gy)
        assert_allclose(ga, gy[:, :3])
        assert_allclose(gb, gy[:, 3:])

    def test_extent_mismatch_rejected(self):
        with pytest.raises(ops.ShapeError):
            ops.concat_axis([np.zeros((1, 2, 3, 3)), np.zeros((1, 2, 4, 3))], 1)


class TestFiniteDiff:
    def test_quadratic(self):
        x = np.random.default_rng(17).standard_normal((3, 4))
        g = ops.finite_diff_grad(lambda v: float((v ** 2).sum()), x)
        assert ops.relative_error(g, 2 * x) < 1e-8

    def test_linear(self):
        x = np.random.default_rng(18).standard_normal(6)
        g = ops.finite_diff_grad(lambda v: float(v.sum()), x)
        assert_allclose(g, 1.0, rtol=1e-8)

    def test_conv_composite_self_consistency(self):
        rng = np.random.default_rng(19)
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        gx, _, _ = ops.conv2d_backward(
            x, w, np.ones((1, 3, 4, 4)), padding=1, with_bias=False)
        fd = ops.finite_diff_grad(
            lambda v: ops.conv2d(v, w, None, padding=1).sum(), x)
        assert ops.relative_error(gx, fd) < 1e-6

    def test_non_finite_reported_with_cell(self):
        def f(v):
            with np.errstate(divide="ignore", invalid="ignore"):
                return float(np.log(v).sum())
        with pytest.raises(ops.FiniteDiffError):
            ops.finite_diff_grad(f, np.array([1.0, 0.0, 1.0]) * 1e-6)
