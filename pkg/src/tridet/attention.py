"""Triple-awareness detection head: level stacking, the scale / spatial /
task attention components, their composition into dynamic blocks, and the
final head convolutions.

Features flow as StackedFeature, a [S_L, S, C] view of a C x H x W map
with S = H * W.  The level count S_L is 2 by self-stacking; the spatial
attention aggregates from the first level and broadcasts its result to
both, and recovery averages the levels so gradients reach both paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .layers import Activation, Conv2d, Layer, Linear, Param

STENCIL_K = 9
# 3x3 base stencil displacements (dy, dx), row-major, center at index 4
BASE_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


@dataclass
class StackedFeature:
    data: np.ndarray          # [S_L, S, C]
    hw: tuple[int, int]

    def __post_init__(self):
        h, w = self.hw
        if self.data.shape[1] != h * w:
            raise ops.ShapeError(
                f"S={self.data.shape[1]} does not match H*W={h * w}")

    @property
    def levels(self):
        return self.data.shape[0]


def _to_chw(mat, hw):
    """[S, C] -> [C, H, W]."""
    h, w = hw
    return np.ascontiguousarray(mat.T).reshape(mat.shape[1], h, w)


def _from_chw(x):
    """[C, H, W] -> [S, C]."""
    c = x.shape[0]
    return np.ascontiguousarray(x.reshape(c, -1).T)


def concat_levels(x):
    """Stack a C x H x W feature with itself: S_L = 2, identical slices."""
    if x.ndim != 3:
        raise ops.ShapeError(f"concat_levels expects rank-3 input, got {x.ndim}")
    flat = _from_chw(np.asarray(x, dtype=np.float64))
    return StackedFeature(np.stack([flat, flat]), (x.shape[1], x.shape[2]))


def concat_levels_backward(gdata, hw):
    return _to_chw(gdata.sum(axis=0), hw)


def recover(sf):
    """Mean over the level axis, reshaped back to C x H x W."""
    return _to_chw(sf.data.mean(axis=0), sf.hw)


def recover_backward(sf, gy):
    gmat = _from_chw(gy) / sf.levels
    return np.broadcast_to(gmat[None], sf.data.shape).copy()


class ScaleAttention(Layer):
    """Per-level scalar gates from the (S, C)-pooled means through a linear
    map and a hard sigmoid."""

    def __init__(self, n_levels=2):
        self.weight = Param(np.zeros((n_levels, n_levels)))
        self.bias = Param(np.full(n_levels, 0.5))
        self._cache = None

    def forward(self, sf):
        data = sf.data
        m = data.mean(axis=(1, 2))
        z = self.weight.value @ m + self.bias.value
        g = ops.hard_sigmoid(z)
        self._cache = (data, m, z, g)
        return StackedFeature(data * g[:, None, None], sf.hw)

    def backward(self, gout):
        data, m, z, g = self._cache
        gdata = gout.data * g[:, None, None]
        dg = (gout.data * data).sum(axis=(1, 2))
        dz = dg * ops.activation_deriv("hard_sigmoid", z)
        self.weight.grad += np.outer(dz, m)
        self.bias.grad += dz
        gm = self.weight.value.T @ dz
        count = data.shape[1] * data.shape[2]
        gdata += gm[:, None, None] / count
        return StackedFeature(gdata, gout.hw)

    def gates(self, sf):
        m = sf.data.mean(axis=(1, 2))
        return ops.hard_sigmoid(self.weight.value @ m + self.bias.value)


class SpatialAttention(Layer):
    """Sparse deformable sampling over the aggregation level.

    Offsets (2K channels) and pre-sigmoid modulations (K channels) are
    predicted by zero-initialized 3x3 convolutions on the recovered view;
    per-tap weights start as a delta at the stencil center.
    """

    def __init__(self, channels, rng=None, unit_modulation=False,
                 depthwise=False):
        if depthwise:
            # depth-wise 3x3 context + zero-initialized point-wise heads
            self.offset_dw = Conv2d(channels, channels, 3, rng,
                                    groups=channels)
            self.mod_dw = Conv2d(channels, channels, 3, rng, groups=channels)
            self.offset_pred = Conv2d(channels, 2 * STENCIL_K, 1,
                                      zero_init=True)
            self.mod_pred = Conv2d(channels, STENCIL_K, 1, zero_init=True)
        else:
            self.offset_dw = None
            self.mod_dw = None
            self.offset_pred = Conv2d(channels, 2 * STENCIL_K, 3,
                                      zero_init=True)
            self.mod_pred = Conv2d(channels, STENCIL_K, 3, zero_init=True)
        wk = np.zeros(STENCIL_K)
        wk[4] = 1.0
        self.tap_weights = Param(wk)
        self.unit_modulation = unit_modulation
        self._cache = None

    def forward(self, sf):
        data = sf.data
        h, w = sf.hw
        base = _to_chw(data[0], sf.hw)
        rec = _to_chw(data.mean(axis=0), sf.hw)
        rec_off = rec[None]
        rec_mod = rec[None]
        if self.offset_dw is not None:
            rec_off = self.offset_dw.forward(rec_off)
            rec_mod = self.mod_dw.forward(rec_mod)
        offsets = self.offset_pred.forward(rec_off)[0]
        mod_raw = self.mod_pred.forward(rec_mod)[0]
        if not np.isfinite(offsets).all():
            raise ValueError("spatial attention predicted non-finite offsets")
        if self.unit_modulation:
            mod = np.ones_like(mod_raw)
        else:
            mod = ops.sigmoid(mod_raw)
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        wk = self.tap_weights.value
        out = np.zeros_like(base)
        coords = []
        samples = []
        for k, (dy, dx) in enumerate(BASE_OFFSETS):
            ys = yy + dy + offsets[2 * k]
            xs = xx + dx + offsets[2 * k + 1]
            s_k = ops.grid_sample_zero(base, ys, xs)
            coords.append((ys, xs))
            samples.append(s_k)
            out += wk[k] * s_k * mod[k][None]
        self._cache = (sf, base, mod, mod_raw, coords, samples)
        flat = _from_chw(out)
        return StackedFeature(np.broadcast_to(flat[None], data.shape).copy(), sf.hw)

    def backward(self, gout):
        sf, base, mod, mod_raw, coords, samples = self._cache
        g_sp = _to_chw(gout.data.sum(axis=0), sf.hw)
        wk = self.tap_weights.value
        g_base = np.zeros_like(base)
        g_off = np.zeros((2 * STENCIL_K,) + base.shape[1:])
        g_mod = np.zeros((STENCIL_K,) + base.shape[1:])
        gwk = np.zeros(STENCIL_K)
        for k in range(STENCIL_K):
            ys, xs = coords[k]
            s_k = samples[k]
            gwk[k] = float((g_sp * s_k * mod[k][None]).sum())
            g_mod[k] = (g_sp * s_k).sum(axis=0) * wk[k]
            g_sample = g_sp * (wk[k] * mod[k])[None]
            gb, gys, gxs = ops.grid_sample_zero_backward(base, ys, xs, g_sample)
            g_base += gb
            g_off[2 * k] = gys
            g_off[2 * k + 1] = gxs
        self.tap_weights.grad += gwk
        if self.unit_modulation:
            g_mod_raw = np.zeros_like(mod_raw)
        else:
            g_mod_raw = g_mod * mod * (1.0 - mod)
        g_off_in = self.offset_pred.backward(g_off[None])
        g_mod_in = self.mod_pred.backward(g_mod_raw[None])
        if self.offset_dw is not None:
            g_off_in = self.offset_dw.backward(g_off_in)
            g_mod_in = self.mod_dw.backward(g_mod_in)
        g_rec = g_off_in[0] + g_mod_in[0]
        gdata = np.broadcast_to(
            (_from_chw(g_rec) / sf.levels)[None], sf.data.shape).copy()
        gdata[0] += _from_chw(g_base)
        return StackedFeature(gdata, sf.hw)


class TaskAttention(Layer):
    """Channel-wise dynamic activation (DY-ReLU, shared-coefficient mode).

    The hyper function pools global context, runs two fully connected
    layers with a ReLU between, remaps through a hard sigmoid to [-1, 1],
    and shifts the default coefficients (1, 0, 0, 0); the output takes the
    pointwise max of the two affine branches.
    """

    def __init__(self, channels, rng=None, reduction=4, lambda_a=1.0,
                 lambda_b=0.5, coeff_override=None):
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, 4, zero_init=True)
        self.lambda_a = lambda_a
        self.lambda_b = lambda_b
        self.coeff_override = coeff_override
        self._cache = None

    def coefficients(self, data):
        if self.coeff_override is not None:
            return tuple(self.coeff_override), None
        ctx = data.mean(axis=(0, 1))
        h1 = self.fc1.forward(ctx)
        a = ops.activation("relu", h1)
        v = self.fc2.forward(a)
        t = 2.0 * ops.hard_sigmoid(v) - 1.0
        a1 = 1.0 + self.lambda_a * t[0]
        b1 = self.lambda_b * t[1]
        a2 = self.lambda_a * t[2]
        b2 = self.lambda_b * t[3]
        return (a1, b1, a2, b2), (ctx, h1, v)

    def forward(self, sf):
        data = sf.data
        (a1, b1, a2, b2), inner = self.coefficients(data)
        br1 = a1 * data + b1
        br2 = a2 * data + b2
        mask = br1 >= br2
        self._cache = (sf, (a1, b1, a2, b2), inner, mask)
        return StackedFeature(np.where(mask, br1, br2), sf.hw)

    def backward(self, gout):
        sf, (a1, b1, a2, b2), inner, mask = self._cache
        data = sf.data
        g = gout.data
        gdata = g * np.where(mask, a1, a2)
        if inner is not None:
            da1 = float((g * mask * data).sum())
            db1 = float((g * mask).sum())
            da2 = float((g * ~mask * data).sum())
            db2 = float((g * ~mask).sum())
            ctx, h1, v = inner
            dt = np.array([self.lambda_a * da1, self.lambda_b * db1,
                           self.lambda_a * da2, self.lambda_b * db2])
            dv = dt * 2.0 * ops.activation_deriv("hard_sigmoid", v)
            da = self.fc2.backward(dv)
            dh1 = da * ops.activation_deriv("relu", h1)
            dctx = self.fc1.backward(dh1)
            count = data.shape[0] * data.shape[1]
            gdata = gdata + dctx[None, None, :] / count
        return StackedFeature(gdata, sf.hw)


class DynamicBlock(Layer):
    """Sequential composition scale -> spatial -> task attention."""

    def __init__(self, channels, rng=None, n_levels=2, reduction=4,
                 lambda_a=1.0, lambda_b=0.5, depthwise=False):
        self.scale = ScaleAttention(n_levels)
        self.spatial = SpatialAttention(channels, rng, depthwise=depthwise)
        self.task = TaskAttention(channels, rng, reduction, lambda_a, lambda_b)

    def forward(self, sf):
        return self.task.forward(self.spatial.forward(self.scale.forward(sf)))

    def backward(self, gout):
        return self.scale.backward(self.spatial.backward(self.task.backward(gout)))


class TDAHead(Layer):
    """Concat -> dynamic blocks -> recover -> 3x3 conv + leaky ReLU -> 1x1
    conv emitting A * (5 + num_classes) raw prediction channels."""

    def __init__(self, channels, n_blocks, num_classes, anchors_per_level,
                 rng=None, reduction=4, lambda_a=1.0, lambda_b=0.5,
                 depthwise=False):
        if n_blocks not in (1, 2):
            raise ValueError(f"n_blocks must be 1 or 2, got {n_blocks}")
        self.blocks = [DynamicBlock(channels, rng, 2, reduction, lambda_a,
                                    lambda_b, depthwise)
                       for _ in range(n_blocks)]
        self.out_channels = anchors_per_level * (5 + num_classes)
        if depthwise:
            self.conv3 = Conv2d(channels, channels, 3, rng, groups=channels)
            self.conv3_pw = Conv2d(channels, channels, 1, rng)
        else:
            self.conv3 = Conv2d(channels, channels, 3, rng)
            self.conv3_pw = None
        self.act = Activation("leaky_relu")
        self.conv1 = Conv2d(channels, self.out_channels, 1, rng)
        self._sf = None

    def forward(self, x):
        sf = concat_levels(x)
        for blk in self.blocks:
            sf = blk.forward(sf)
        self._sf = sf
        r = recover(sf)
        y = self.conv3.forward(r[None])
        if self.conv3_pw is not None:
            y = self.conv3_pw.forward(y)
        y = self.act.forward(y)
        return self.conv1.forward(y)[0]

    def backward(self, graw):
        g = self.conv1.backward(graw[None])
        g = self.act.backward(g)
        if self.conv3_pw is not None:
            g = self.conv3_pw.backward(g)
        g = self.conv3.backward(g)[0]
        gsf = StackedFeature(recover_backward(self._sf, g), self._sf.hw)
        for blk in reversed(self.blocks):
            gsf = blk.backward(gsf)
        return concat_levels_backward(gsf.data, gsf.hw)
