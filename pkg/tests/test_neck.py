"""Backbone stub, spatial pyramid pooling, CSP substitution, and the
fusion neck's shape/stride/parameter contracts."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from tridet import ops
from tridet.neck import (CSPLayer, CspSppBlock, Neck, SPP, SppBlock,
                         ThreeConvBlock, ToyBackbone, count_params)
from tridet.layers import Conv2d, Layer, conv_block


class TestToyBackbone:
    def test_stride_arithmetic(self):
        bb = ToyBackbone((16, 32, 64), np.random.default_rng(0))
        fp = bb.forward(np.random.default_rng(1).random((3, 64, 64)))
        assert fp.c3.shape == (1, 16, 8, 8)
        assert fp.c4.shape == (1, 32, 4, 4)
        assert fp.c5.shape == (1, 64, 2, 2)

    def test_zero_weights_zero_features(self):
        bb = ToyBackbone((16, 32, 64))
        for p in bb.params():
            p.value[:] = 0.0
        fp = bb.forward(np.random.default_rng(2).random((3, 64, 64)))
        assert_allclose(fp.c3, 0.0)
        assert_allclose(fp.c5, 0.0)

    def test_indivisible_extents_rejected(self):
        bb = ToyBackbone((16, 32, 64))
        with pytest.raises(ops.ShapeError):
            bb.forward(np.zeros((3, 60, 64)))

    def test_param_count_closed_form(self):
        widths = (16, 32, 64)
        bb = ToyBackbone(widths, np.random.default_rng(3))
        chain = [(3, 8), (8, 16), (16, 16), (16, 32), (32, 64)]
        expect = sum(co * ci * 9 + co for ci, co in chain)
        assert bb.n_params() == expect


class TestSPP:
    def test_channel_multiplication(self):
        spp = SPP()
        y = spp.forward(np.zeros((1, 8, 4, 4)))
        assert y.shape == (1, 32, 4, 4)

    def test_constant_preserved(self):
        spp = SPP()
        y = spp.forward(np.full((1, 2, 6, 6), 1.25))
        assert_allclose(y, 1.25)

    def test_branches_match_max_pool_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 3, 8, 8))
        y = SPP().forward(x)
        parts = ops.split_axis(y, 1, [3, 3, 3, 3])
        assert_allclose(parts[0], x)
        for k, part in zip((5, 9, 13), parts[1:]):
            assert_allclose(part, ops.max_pool2d(x, k))

    def test_even_pool_rejected(self):
        with pytest.raises(ops.ShapeError):
            SPP(pools=(4,))


class TestCSPLayer:
    def test_shape_preservation(self):
        rng = np.random.default_rng(5)
        layer = CSPLayer(16, 8, rng)
        y = layer.forward(rng.standard_normal((1, 16, 6, 6)))
        assert y.shape == (1, 8, 6, 6)

    def test_linear_configuration_matches_composed_conv_oracle(self):
        # with activations disabled the whole layer is one linear map,
        # reproducible by composing plain convolutions
        rng = np.random.default_rng(6)
        layer = CSPLayer(8, 8, rng, act=None)
        x = rng.standard_normal((1, 8, 5, 5))
        y = layer.forward(x)
        a = x
        for stage in layer.branch_a.stages:
            if isinstance(stage, Conv2d):
                a = ops.conv2d(a, stage.weight.value, stage.bias.value,
                               stride=stage.stride, padding=stage.padding)
        b = x
        for seq in (layer.branch_b, layer.inner):
            for stage in (seq.stages if hasattr(seq, "stages") else [seq]):
                for conv in (stage.stages if hasattr(stage, "stages") else [stage]):
                    if isinstance(conv, Conv2d):
                        b = ops.conv2d(b, conv.weight.value, conv.bias.value,
                                       stride=conv.stride, padding=conv.padding,
                                       groups=conv.groups)
        merged = np.concatenate([a, b], axis=1)
        for stage in layer.merge.stages:
            if isinstance(stage, Conv2d):
                merged = ops.conv2d(merged, stage.weight.value, stage.bias.value,
                                    stride=stage.stride, padding=stage.padding)
        assert_allclose(y, merged, atol=1e-12)

    @pytest.mark.parametrize("width", [32, 64, 128, 256])
    def test_fewer_params_than_three_conv_block(self, width):
        rng = np.random.default_rng(7)
        csp = CSPLayer(2 * width, width, rng)
        plain = ThreeConvBlock(2 * width, width, rng)
        assert csp.n_params() < plain.n_params()

    def test_spp_block_substitution_reduces_params(self):
        rng = np.random.default_rng(8)
        plain = SppBlock(64, 32, rng)
        csp = CspSppBlock(64, 32, rng)
        assert csp.n_params() < plain.n_params()


class TestNeck:
    def _fp(self, rng, widths=(16, 32, 64)):
        return (rng.standard_normal((1, widths[0], 8, 8)),
                rng.standard_normal((1, widths[1], 4, 4)),
                rng.standard_normal((1, widths[2], 2, 2)))

    def test_output_strides_preserved(self):
        rng = np.random.default_rng(9)
        neck = Neck((16, 32, 64), rng, ca_ratio=4)
        from tridet.neck import FeaturePyramid
        out = neck.forward(FeaturePyramid(*self._fp(rng)))
        assert out.c3.shape == (1, 8, 8, 8)
        assert out.c4.shape == (1, 16, 4, 4)
        assert out.c5.shape == (1, 32, 2, 2)

    def test_upsample_doubles_extents(self):
        from tridet.layers import UpsampleNearest2x
        x = np.arange(4.0).reshape(1, 1, 2, 2)
        y = UpsampleNearest2x().forward(x)
        assert y.shape == (1, 1, 4, 4)
        assert_allclose(y[0, 0, :2, :2], x[0, 0, 0, 0])

    def test_csp_toggle_reduces_params_same_shapes(self):
        rng = np.random.default_rng(10)
        from tridet.neck import FeaturePyramid
        plain = Neck((16, 32, 64), np.random.default_rng(0), 4, csp_enabled=False)
        csp = Neck((16, 32, 64), np.random.default_rng(0), 4, csp_enabled=True)
        assert csp.n_params() < plain.n_params()
        fp = FeaturePyramid(*self._fp(rng))
        out_a = plain.forward(fp)
        out_b = csp.forward(fp)
        for a, b in zip(out_a, out_b):
            assert a.shape == b.shape

    def test_deterministic_forward(self):
        rng = np.random.default_rng(11)
        from tridet.neck import FeaturePyramid
        neck = Neck((16, 32, 64), np.random.default_rng(1), 4)
        fp = FeaturePyramid(*self._fp(rng))
        a = neck.forward(fp)
        b = neck.forward(fp)
        assert (a.c3 == b.c3).all() and (a.c5 == b.c5).all()

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        from tridet.neck import FeaturePyramid
        neck = Neck((4, 8, 16), np.random.default_rng(2), ca_ratio=2)
        c3 = rng.standard_normal((1, 4, 4, 4))
        c4 = rng.standard_normal((1, 8, 2, 2))
        c5 = rng.standard_normal((1, 16, 1, 1))
        r3 = rng.standard_normal((1, 2, 4, 4))
        r4 = rng.standard_normal((1, 4, 2, 2))
        r5 = rng.standard_normal((1, 8, 1, 1))

        def loss(a3, a4, a5):
            out = neck.forward(FeaturePyramid(a3, a4, a5))
            return float((out.c3 * r3).sum() + (out.c4 * r4).sum()
                         + (out.c5 * r5).sum())

        loss(c3, c4, c5)
        neck.zero_grad()
        g3, g4, g5 = neck.backward(r3.copy(), r4.copy(), r5.copy())
        fd3 = ops.finite_diff_grad(lambda v: loss(v, c4, c5), c3.copy())
        assert ops.relative_error(g3, fd3) < 1e-4
        fd5 = ops.finite_diff_grad(lambda v: loss(c3, c4, v), c5.copy())
        assert ops.relative_error(g5, fd5) < 1e-4


class TestCountParams:
    def test_single_conv_closed_form(self):
        class Wrap(Layer):
            def __init__(self):
                self.conv = Conv2d(8, 8, 1, np.random.default_rng(0))

        table, total = count_params(Wrap())
        assert total == 8 * 8 + 8 == 72
        assert table == {"conv": 72}

    def test_empty_model(self):
        class Empty(Layer):
            def __init__(self):
                self.nothing = None

        assert count_params(Empty()) == ({}, 0)

    def test_paper_width_csp_delta_positive(self):
        plain = Neck((256, 512, 1024), np.random.default_rng(0), 16,
                     csp_enabled=False)
        csp = Neck((256, 512, 1024), np.random.default_rng(0), 16,
                   csp_enabled=True)
        assert count_params(plain)[1] - count_params(csp)[1] > 0
