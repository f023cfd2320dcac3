"""Dense NCHW tensor kernels with matching analytic backward passes.

Every kernel is a pure function of numpy float64 arrays in row-major
N-C-H-W layout.  For each differentiable op ``foo`` there is a
``foo_backward`` that recomputes whatever intermediates it needs from the
original inputs; nothing here keeps state and nothing builds a graph.
The central-difference oracle ``finite_diff_grad`` is the reference all
backward implementations are tested against.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when an input extent disagrees with what an op requires."""


class FiniteDiffError(RuntimeError):
    """Raised when the finite-difference probe hits a non-finite value."""


def _as_f64(x):
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d_out_hw(h, w, kh, kw, stride, padding, dilation):
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    return ho, wo


def _check_conv_args(x, weight, stride, padding, dilation, groups):
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be rank-4 NCHW, got rank {x.ndim}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be rank-4, got rank {weight.ndim}")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if cin % groups or cout % groups:
        raise ShapeError(
            f"channel counts in={cin} out={cout} not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(
            f"weight expects {cin_g * groups} input channels, input has {cin}")
    ho, wo = conv2d_out_hw(h, w, kh, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"empty output extent {ho}x{wo} for input {h}x{w}")
    return n, cin, h, w, cout, kh, kw, ho, wo


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1, groups=1):
    """Standard 2-D cross-correlation.

    x: [N, Cin, H, W], weight: [Cout, Cin/groups, kH, kW], bias: [Cout].
    """
    x = _as_f64(x)
    weight = _as_f64(weight)
    n, cin, h, w, cout, kh, kw, ho, wo = _check_conv_args(
        x, weight, stride, padding, dilation, groups)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cg = cin // groups
    og = cout // groups
    wg = weight.reshape(groups, og, cg, kh, kw)
    out = np.zeros((n, groups, og, ho, wo))
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :,
                       u * dilation: u * dilation + stride * (ho - 1) + 1: stride,
                       v * dilation: v * dilation + stride * (wo - 1) + 1: stride]
            patch = patch.reshape(n, groups, cg, ho, wo)
            out += np.einsum("ngchw,goc->ngohw", patch, wg[:, :, :, u, v])
    out = out.reshape(n, cout, ho, wo)
    if bias is not None:
        bias = _as_f64(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias has {bias.size} entries, expected {cout}")
        out += bias[None, :, None, None]
    return out


def conv2d_backward(x, weight, gy, stride=1, padding=0, dilation=1, groups=1,
                    with_bias=True):
    """Gradients of conv2d w.r.t. input, weight and bias."""
    x = _as_f64(x)
    weight = _as_f64(weight)
    gy = _as_f64(gy)
    n, cin, h, w, cout, kh, kw, ho, wo = _check_conv_args(
        x, weight, stride, padding, dilation, groups)
    if gy.shape != (n, cout, ho, wo):
        raise ShapeError(f"gy shape {gy.shape} != {(n, cout, ho, wo)}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cg = cin // groups
    og = cout // groups
    wg = weight.reshape(groups, og, cg, kh, kw)
    gyr = gy.reshape(n, groups, og, ho, wo)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(wg)
    for u in range(kh):
        for v in range(kw):
            hsl = slice(u * dilation, u * dilation + stride * (ho - 1) + 1, stride)
            wsl = slice(v * dilation, v * dilation + stride * (wo - 1) + 1, stride)
            patch = xp[:, :, hsl, wsl].reshape(n, groups, cg, ho, wo)
            gw[:, :, :, u, v] += np.einsum("ngohw,ngchw->goc", gyr, patch)
            gpatch = np.einsum("ngohw,goc->ngchw", gyr, wg[:, :, :, u, v])
            gxp[:, :, hsl, wsl] += gpatch.reshape(n, cin, ho, wo)
    gx = gxp[:, :, padding: padding + h, padding: padding + w]
    gw = gw.reshape(cout, cg, kh, kw)
    gb = gy.sum(axis=(0, 2, 3)) if with_bias else None
    return gx, gw, gb


# ---------------------------------------------------------------------------
# fully connected
# ---------------------------------------------------------------------------

def fully_connected(x, weight, bias):
    """y = W x + b for a vector x, or row-wise for a [batch, d] matrix."""
    x = _as_f64(x)
    weight = _as_f64(weight)
    bias = _as_f64(bias)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"input length {x.shape[-1]} != weight inner extent {weight.shape[1]}")
    return x @ weight.T + bias


def fully_connected_backward(x, weight, gy):
    x = _as_f64(x)
    weight = _as_f64(weight)
    gy = _as_f64(gy)
    gx = gy @ weight
    if x.ndim == 1:
        gw = np.outer(gy, x)
        gb = gy.copy()
    else:
        gw = gy.T @ x
        gb = gy.sum(axis=0)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _pool_windows(x, k):
    """Stacked k*k shifted views of x padded with -inf; shape [k*k, N, C, H, W]."""
    n, c, h, w = x.shape
    pad = k // 2
    xp = np.full((n, c, h + 2 * pad, w + 2 * pad), -np.inf)
    xp[:, :, pad: pad + h, pad: pad + w] = x
    views = [xp[:, :, u: u + h, v: v + w] for u in range(k) for v in range(k)]
    return np.stack(views, axis=0)


def max_pool2d(x, k):
    """Stride-1 max pool with same-size output; k must be odd."""
    x = _as_f64(x)
    if k % 2 == 0:
        raise ShapeError(f"max_pool2d kernel must be odd, got {k}")
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects rank-4 input, got rank {x.ndim}")
    return _pool_windows(x, k).max(axis=0)


def max_pool2d_backward(x, k, gy):
    x = _as_f64(x)
    gy = _as_f64(gy)
    if k % 2 == 0:
        raise ShapeError(f"max_pool2d kernel must be odd, got {k}")
    stacked = _pool_windows(x, k)
    arg = stacked.argmax(axis=0)
    n, c, h, w = x.shape
    pad = k // 2
    # argmax index k*k decomposes into the window offset (u, v)
    u = arg // k
    v = arg % k
    oy, ox = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    src_y = oy[None, None] + u - pad
    src_x = ox[None, None] + v - pad
    gx = np.zeros_like(x)
    ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    ni = ni[:, :, None, None] + np.zeros_like(src_y)
    ci = ci[:, :, None, None] + np.zeros_like(src_y)
    valid = (src_y >= 0) & (src_y < h) & (src_x >= 0) & (src_x < w)
    np.add.at(gx, (ni[valid], ci[valid], src_y[valid], src_x[valid]), gy[valid])
    return gx


def global_avg_pool(x, axes, keepdims=True):
    """Mean over the named axes; gradient is 1/count broadcast."""
    x = _as_f64(x)
    axes = tuple(axes)
    if not axes:
        raise ShapeError("global_avg_pool needs a non-empty axis set")
    if any(a >= x.ndim or a < -x.ndim for a in axes):
        raise ShapeError(f"axis out of range for rank-{x.ndim} input: {axes}")
    return x.mean(axis=axes, keepdims=keepdims)


def global_avg_pool_backward(x, axes, gy, keepdims=True):
    x = _as_f64(x)
    axes = tuple(a % x.ndim for a in axes)
    count = int(np.prod([x.shape[a] for a in axes]))
    gy = _as_f64(gy)
    if not keepdims:
        gy = np.expand_dims(gy, axes)
    return np.broadcast_to(gy / count, x.shape).copy()


def directional_pool(x):
    """Per-direction means: q_h [N,C,H,1] over width, q_w [N,C,1,W] over height."""
    x = _as_f64(x)
    if x.ndim != 4:
        raise ShapeError(f"directional_pool expects rank-4 input, got rank {x.ndim}")
    q_h = x.mean(axis=3, keepdims=True)
    q_w = x.mean(axis=2, keepdims=True)
    return q_h, q_w


def directional_pool_backward(x, g_qh, g_qw):
    x = _as_f64(x)
    n, c, h, w = x.shape
    return (np.broadcast_to(_as_f64(g_qh) / w, x.shape)
            + np.broadcast_to(_as_f64(g_qw) / h, x.shape))


# ---------------------------------------------------------------------------
# bilinear sampling (zero padding outside the grid)
# ---------------------------------------------------------------------------

def grid_sample_zero(plane, ys, xs):
    """Bilinear samples of plane [C, H, W] at coordinate arrays ys, xs.

    Coordinates are shared across channels.  Cells outside
    [0, H-1] x [0, W-1] contribute zero.  Returns [C, *ys.shape].
    """
    plane = _as_f64(plane)
    ys = _as_f64(ys)
    xs = _as_f64(xs)
    if not (np.isfinite(ys).all() and np.isfinite(xs).all()):
        raise ValueError("grid_sample_zero got non-finite coordinates")
    c, h, w = plane.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    ly = ys - y0
    lx = xs - x0
    out = np.zeros((c,) + ys.shape)
    for dy, dx, wt in (
        (0, 0, (1 - ly) * (1 - lx)),
        (0, 1, (1 - ly) * lx),
        (1, 0, ly * (1 - lx)),
        (1, 1, ly * lx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = plane[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        out += vals * (wt * valid)[None]
    return out


def grid_sample_zero_backward(plane, ys, xs, gout):
    """Backward of grid_sample_zero; returns (g_plane, g_ys, g_xs)."""
    plane = _as_f64(plane)
    ys = _as_f64(ys)
    xs = _as_f64(xs)
    gout = _as_f64(gout)
    c, h, w = plane.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    ly = ys - y0
    lx = xs - x0
    g_plane = np.zeros_like(plane)
    g_ys = np.zeros_like(ys)
    g_xs = np.zeros_like(xs)
    corners = (
        (0, 0, (1 - ly) * (1 - lx), -(1 - lx), -(1 - ly)),
        (0, 1, (1 - ly) * lx, -lx, (1 - ly)),
        (1, 0, ly * (1 - lx), (1 - lx), -ly),
        (1, 1, ly * lx, lx, ly),
    )
    ci = np.arange(c)
    for dy, dx, wt, dwdy, dwdx in corners:
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yyc = np.clip(yy, 0, h - 1)
        xxc = np.clip(xx, 0, w - 1)
        vals = plane[:, yyc, xxc] * valid[None]
        # plane gradient: scatter weight * gout into the valid corner cells
        contrib = gout * (wt * valid)[None]
        idx = valid.nonzero()
        if idx[0].size:
            flat_y = yyc[idx]
            flat_x = xxc[idx]
            for chan in ci:
                np.add.at(g_plane[chan], (flat_y, flat_x), contrib[chan][idx])
        gsum = (gout * vals).sum(axis=0)
        g_ys += gsum * dwdy
        g_xs += gsum * dwdx
    return g_plane, g_ys, g_xs


def bilinear_sample(x, n, c, py, px):
    """Single bilinear sample of x[n, c] at real coordinates (py, px)."""
    x = _as_f64(x)
    if not (np.isfinite(py) and np.isfinite(px)):
        raise ValueError("bilinear_sample got non-finite coordinates")
    out = grid_sample_zero(x[n, c][None], np.array([py]), np.array([px]))
    return float(out[0, 0])


def bilinear_sample_backward(x, n, c, py, px, gout=1.0):
    """Gradients of bilinear_sample w.r.t. the sampled plane and (py, px)."""
    x = _as_f64(x)
    g_plane, g_ys, g_xs = grid_sample_zero_backward(
        x[n, c][None], np.array([py]), np.array([px]), np.array([[gout]]))
    gx = np.zeros_like(x)
    gx[n, c] = g_plane[0]
    return gx, float(g_ys[0]), float(g_xs[0])


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

ACTIVATIONS = ("relu", "leaky_relu", "sigmoid", "hard_sigmoid")


def activation(kind, x):
    x = _as_f64(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        return np.where(x > 0, x, 0.1 * x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "hard_sigmoid":
        return hard_sigmoid(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def activation_backward(kind, x, gy):
    x = _as_f64(x)
    gy = _as_f64(gy)
    return gy * activation_deriv(kind, x)


def activation_deriv(kind, x):
    x = _as_f64(x)
    if kind == "relu":
        return (x > 0).astype(np.float64)
    if kind == "leaky_relu":
        return np.where(x > 0, 1.0, 0.1)
    if kind == "sigmoid":
        s = sigmoid(x)
        return s * (1.0 - s)
    if kind == "hard_sigmoid":
        # subgradient 0 at the +/-1 kinks
        return np.where((x > -1.0) & (x < 1.0), 0.5, 0.0)
    raise ValueError(f"unknown activation kind {kind!r}")


def sigmoid(x):
    x = _as_f64(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def hard_sigmoid(x):
    """max(0, min(1, (x + 1) / 2))."""
    x = _as_f64(x)
    return np.clip((x + 1.0) * 0.5, 0.0, 1.0)


# ---------------------------------------------------------------------------
# batchnorm (inference statistics)
# ---------------------------------------------------------------------------

def batchnorm_inference(x, scale, shift, mean, var, eps=1e-5):
    """(x - mean) / sqrt(var + eps) * scale + shift, all per channel."""
    x = _as_f64(x)
    scale, shift, mean, var = map(_as_f64, (scale, shift, mean, var))
    c = x.shape[1]
    for name, v in (("scale", scale), ("shift", shift), ("mean", mean), ("var", var)):
        if v.shape != (c,):
            raise ShapeError(f"batchnorm {name} has {v.size} entries, expected {c}")
    if (var < 0).any():
        raise ValueError("batchnorm got negative variance")
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mean[None, :, None, None]) * (scale * inv)[None, :, None, None] \
        + shift[None, :, None, None]


def batchnorm_inference_backward(x, scale, shift, mean, var, gy, eps=1e-5):
    """Gradients w.r.t. x, scale, shift (statistics held constant)."""
    x = _as_f64(x)
    scale, mean, var = map(_as_f64, (scale, mean, var))
    gy = _as_f64(gy)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    gx = gy * (scale * inv)[None, :, None, None]
    gscale = (gy * xhat).sum(axis=(0, 2, 3))
    gshift = gy.sum(axis=(0, 2, 3))
    return gx, gscale, gshift


# ---------------------------------------------------------------------------
# concat / split
# ---------------------------------------------------------------------------

def concat_axis(xs, axis):
    xs = [_as_f64(x) for x in xs]
    ref = xs[0].shape
    for i, x in enumerate(xs[1:], start=1):
        for a in range(len(ref)):
            if a != axis % len(ref) and x.shape[a] != ref[a]:
                raise ShapeError(
                    f"concat input {i} extent {x.shape[a]} != {ref[a]} on axis {a}")
    return np.concatenate(xs, axis=axis)


def split_axis(x, axis, sizes):
    x = _as_f64(x)
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(
            f"split sizes sum {sum(sizes)} != extent {x.shape[axis]} on axis {axis}")
    offsets = np.cumsum(sizes)[:-1]
    return [a.copy() for a in np.split(x, offsets, axis=axis)]


def concat_axis_backward(xs, axis, gy):
    sizes = [x.shape[axis] for x in xs]
    return split_axis(gy, axis, sizes)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of the scalar function f at x.

    The reference every analytic backward in this library is checked
    against; keep it dumb and independent.
    """
    x = _as_f64(x)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FiniteDiffError(
                f"non-finite evaluation while probing cell {np.unravel_index(i, x.shape)}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric):
    """Max absolute difference normalized by the largest gradient magnitude."""
    analytic = _as_f64(analytic)
    numeric = _as_f64(numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max(initial=0.0) / (scale + 1e-12))
