"""Toy backbone plus the improved neck: spatial pyramid pooling wrapped
in five convolution blocks (or their cross-stage-partial replacement),
coordinate-attention taps on C3/C4/C5, and top-down / bottom-up fusion
emitting P3/P4/P5 at strides 8/16/32."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .coordatt import CoordAttention
from .layers import Activation, Conv2d, Layer, Sequential, UpsampleNearest2x, conv_block

SPP_POOLS = (5, 9, 13)


@dataclass
class FeaturePyramid:
    c3: np.ndarray
    c4: np.ndarray
    c5: np.ndarray

    def __iter__(self):
        return iter((self.c3, self.c4, self.c5))


class ToyBackbone(Layer):
    """Five stride-2 convolution stages standing in for a real backbone."""

    STEM = (8, 16)

    def __init__(self, widths, rng=None, depthwise=False):
        w3, w4, w5 = widths
        s1, s2 = self.STEM
        chain = [(3, s1), (s1, s2), (s2, w3), (w3, w4), (w4, w5)]
        self.stages = [
            conv_block(ci, co, 3, rng, stride=2, depthwise=depthwise)
            for ci, co in chain
        ]

    def forward(self, image):
        if image.ndim != 3 or image.shape[0] != 3:
            raise ops.ShapeError(f"backbone expects a 3xHxW image, got {image.shape}")
        h, w = image.shape[1:]
        if h % 32 or w % 32:
            raise ops.ShapeError(f"image extents {h}x{w} not divisible by 32")
        x = np.asarray(image, dtype=np.float64)[None]
        taps = []
        for stage in self.stages:
            x = stage.forward(x)
            taps.append(x)
        return FeaturePyramid(taps[2], taps[3], taps[4])

    def backward(self, gc3, gc4, gc5):
        g = self.stages[4].backward(gc5)
        g = self.stages[3].backward(g + gc4)
        g = self.stages[2].backward(g + gc3)
        g = self.stages[1].backward(g)
        g = self.stages[0].backward(g)
        return g[0]


class SPP(Layer):
    """Concat of the identity with stride-1 max pools of growing kernels."""

    def __init__(self, pools=SPP_POOLS):
        for k in pools:
            if k % 2 == 0:
                raise ops.ShapeError(f"SPP pool size must be odd, got {k}")
        self.pools = tuple(pools)
        self._x = None

    def forward(self, x):
        self._x = x
        return ops.concat_axis([x] + [ops.max_pool2d(x, k) for k in self.pools], 1)

    def backward(self, gy):
        c = self._x.shape[1]
        parts = ops.split_axis(gy, 1, [c] * (1 + len(self.pools)))
        gx = parts[0]
        for k, g in zip(self.pools, parts[1:]):
            gx = gx + ops.max_pool2d_backward(self._x, k, g)
        return gx


class SppBlock(Layer):
    """The plain five-conv arrangement around SPP: three convs in, SPP,
    two convs out."""

    def __init__(self, cin, mid, rng=None, depthwise=False):
        self.pre = Sequential(
            conv_block(cin, mid, 1, rng),
            conv_block(mid, 2 * mid, 3, rng, depthwise=depthwise),
            conv_block(2 * mid, mid, 1, rng),
        )
        self.spp = SPP()
        self.post = Sequential(
            conv_block(4 * mid, 2 * mid, 3, rng, depthwise=depthwise),
            conv_block(2 * mid, mid, 1, rng),
        )

    def forward(self, x):
        return self.post.forward(self.spp.forward(self.pre.forward(x)))

    def backward(self, gy):
        return self.pre.backward(self.spp.backward(self.post.backward(gy)))


class CspSppBlock(Layer):
    """Cross-stage-partial replacement for the five-conv SPP block: a
    shortcut branch and a processed branch holding the SPP, merged 1x1."""

    def __init__(self, cin, mid, rng=None, depthwise=False):
        self.shortcut = conv_block(cin, mid, 1, rng)
        self.entry = conv_block(cin, mid, 1, rng)
        self.pre = conv_block(mid, mid, 3, rng, depthwise=depthwise)
        self.spp = SPP()
        self.post = conv_block(4 * mid, mid, 1, rng)
        self.merge = conv_block(2 * mid, mid, 1, rng)

    def forward(self, x):
        a = self.shortcut.forward(x)
        b = self.post.forward(self.spp.forward(self.pre.forward(self.entry.forward(x))))
        return self.merge.forward(ops.concat_axis([a, b], 1))

    def backward(self, gy):
        g = self.merge.backward(gy)
        mid = g.shape[1] // 2
        ga, gb = ops.split_axis(g, 1, [mid, mid])
        gx = self.shortcut.backward(ga)
        gb = self.entry.backward(
            self.pre.backward(self.spp.backward(self.post.backward(gb))))
        return gx + gb


class ThreeConvBlock(Layer):
    """1x1 / 3x3 / 1x1 fusion stack mapping cin channels to cout."""

    def __init__(self, cin, cout, rng=None, depthwise=False):
        self.body = Sequential(
            conv_block(cin, cout, 1, rng),
            conv_block(cout, 2 * cout, 3, rng, depthwise=depthwise),
            conv_block(2 * cout, cout, 1, rng),
        )

    def forward(self, x):
        return self.body.forward(x)

    def backward(self, gy):
        return self.body.backward(gy)


class CSPLayer(Layer):
    """Split into a shortcut and a processed branch, concat, 1x1 merge.

    Fewer parameters than the three-conv block it replaces at equal
    widths; ``act=None`` makes the whole layer linear for oracle tests.
    """

    def __init__(self, cin, cout, rng=None, n=1, act="leaky_relu", depthwise=False):
        half = cout // 2
        self.branch_a = conv_block(cin, half, 1, rng, act=act)
        self.branch_b = conv_block(cin, half, 1, rng, act=act)
        inner = []
        for _ in range(n):
            inner.append(conv_block(half, half, 1, rng, act=act))
            inner.append(conv_block(half, half, 3, rng, act=act, depthwise=depthwise))
        self.inner = Sequential(*inner)
        self.merge = conv_block(2 * half, cout, 1, rng, act=act)
        self._half = half

    def forward(self, x):
        a = self.branch_a.forward(x)
        b = self.inner.forward(self.branch_b.forward(x))
        return self.merge.forward(ops.concat_axis([a, b], 1))

    def backward(self, gy):
        g = self.merge.backward(gy)
        ga, gb = ops.split_axis(g, 1, [self._half, self._half])
        return self.branch_a.backward(ga) \
            + self.branch_b.backward(self.inner.backward(gb))


class Neck(Layer):
    """Feature fusion from (C3, C4, C5) to (P3, P4, P5), with coordinate
    attention applied at each backbone tap."""

    def __init__(self, widths, rng=None, ca_ratio=16, csp_enabled=False,
                 depthwise=False):
        w3, w4, w5 = widths
        h3, h4, h5 = w3 // 2, w4 // 2, w5 // 2
        self.out_channels = (h3, h4, h5)
        self.ca3 = CoordAttention(w3, ca_ratio, rng)
        self.ca4 = CoordAttention(w4, ca_ratio, rng)
        self.ca5 = CoordAttention(w5, ca_ratio, rng)
        if csp_enabled:
            self.spp_block = CspSppBlock(w5, h5, rng, depthwise)
            self.fuse4 = CSPLayer(2 * h4, h4, rng, depthwise=depthwise)
            self.fuse3 = CSPLayer(2 * h3, h3, rng, depthwise=depthwise)
            self.fuse4b = CSPLayer(2 * h4, h4, rng, depthwise=depthwise)
            self.fuse5b = CSPLayer(2 * h5, h5, rng, depthwise=depthwise)
        else:
            self.spp_block = SppBlock(w5, h5, rng, depthwise)
            self.fuse4 = ThreeConvBlock(2 * h4, h4, rng, depthwise)
            self.fuse3 = ThreeConvBlock(2 * h3, h3, rng, depthwise)
            self.fuse4b = ThreeConvBlock(2 * h4, h4, rng, depthwise)
            self.fuse5b = ThreeConvBlock(2 * h5, h5, rng, depthwise)
        self.reduce5 = conv_block(h5, h4, 1, rng)
        self.reduce4 = conv_block(h4, h3, 1, rng)
        self.lat4 = conv_block(w4, h4, 1, rng)
        self.lat3 = conv_block(w3, h3, 1, rng)
        self.up5 = UpsampleNearest2x()
        self.up4 = UpsampleNearest2x()
        self.down3 = conv_block(h3, h4, 3, rng, stride=2, depthwise=depthwise)
        self.down4 = conv_block(h4, h5, 3, rng, stride=2, depthwise=depthwise)

    def ca_taps(self):
        return (self.ca3, self.ca4, self.ca5)

    def forward(self, fp):
        a5 = self.ca5.forward(fp.c5)
        n5 = self.spp_block.forward(a5)
        t4 = self.up5.forward(self.reduce5.forward(n5))
        a4 = self.ca4.forward(fp.c4)
        m4 = self.fuse4.forward(ops.concat_axis([self.lat4.forward(a4), t4], 1))
        t3 = self.up4.forward(self.reduce4.forward(m4))
        a3 = self.ca3.forward(fp.c3)
        p3 = self.fuse3.forward(ops.concat_axis([self.lat3.forward(a3), t3], 1))
        p4 = self.fuse4b.forward(ops.concat_axis([self.down3.forward(p3), m4], 1))
        p5 = self.fuse5b.forward(ops.concat_axis([self.down4.forward(p4), n5], 1))
        self._taps = (a3, a4, a5)
        return FeaturePyramid(p3, p4, p5)

    def backward(self, gp3, gp4, gp5):
        h3, h4, h5 = self.out_channels
        g = self.fuse5b.backward(gp5)
        gd4, gn5 = ops.split_axis(g, 1, [h5, h5])
        gp4 = gp4 + self.down4.backward(gd4)
        g = self.fuse4b.backward(gp4)
        gd3, gm4 = ops.split_axis(g, 1, [h4, h4])
        gp3 = gp3 + self.down3.backward(gd3)
        g = self.fuse3.backward(gp3)
        gl3, gt3 = ops.split_axis(g, 1, [h3, h3])
        gc3 = self.ca3.backward(self.lat3.backward(gl3))
        gm4 = gm4 + self.reduce4.backward(self.up4.backward(gt3))
        g = self.fuse4.backward(gm4)
        gl4, gt4 = ops.split_axis(g, 1, [h4, h4])
        gc4 = self.ca4.backward(self.lat4.backward(gl4))
        gn5 = gn5 + self.reduce5.backward(self.up5.backward(gt4))
        gc5 = self.ca5.backward(self.spp_block.backward(gn5))
        return gc3, gc4, gc5


def count_params(model, trainable_only=True):
    """Per-submodule trainable scalar counts plus the total."""
    table = {}
    for name, p in model.named_params():
        if trainable_only and not p.trainable:
            continue
        top = name.split(".")[0]
        table[top] = table.get(top, 0) + p.value.size
    return table, sum(table.values())
