"""Small stateful layer wrappers around the kernels in ops.py.

Each layer caches its forward inputs and accumulates parameter gradients
in backward(), torch-style but without any graph: composite modules wire
their own backward passes by hand.  Parameters live in Param objects so
the model tree can be walked for counting, checkpointing and SGD.
"""

from __future__ import annotations

import numpy as np

from . import ops


class Param:
    __slots__ = ("value", "grad", "trainable")

    def __init__(self, value, trainable=True):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable


class Layer:
    """Base class; Param and Layer attributes register automatically."""

    def __setattr__(self, name, value):
        if isinstance(value, Param):
            self.__dict__.setdefault("_params", {})[name] = value
        elif isinstance(value, Layer):
            self.__dict__.setdefault("_children", {})[name] = value
        elif isinstance(value, (list, tuple)) and value \
                and all(isinstance(v, Layer) for v in value):
            for i, v in enumerate(value):
                self.__dict__.setdefault("_children", {})[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_params(self, prefix=""):
        for name, p in self.__dict__.get("_params", {}).items():
            yield prefix + name, p
        for name, child in self.__dict__.get("_children", {}).items():
            yield from child.named_params(prefix + name + ".")

    def params(self):
        return [p for _, p in self.named_params()]

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0.0

    def n_params(self, trainable_only=True):
        return sum(p.value.size for p in self.params()
                   if p.trainable or not trainable_only)


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Layer):
    def __init__(self, in_c, out_c, k, rng=None, stride=1, padding=None,
                 dilation=1, groups=1, bias=True, zero_init=False):
        self.in_c = in_c
        self.out_c = out_c
        self.k = k
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.dilation = dilation
        self.groups = groups
        fan_in = (in_c // groups) * k * k
        shape = (out_c, in_c // groups, k, k)
        if zero_init or rng is None:
            w = np.zeros(shape)
        else:
            w = uniform_init(rng, shape, fan_in)
        self.weight = Param(w)
        self.bias = Param(np.zeros(out_c)) if bias else None
        self._x = None

    @property
    def is_spatial(self):
        return self.k > 1

    def forward(self, x):
        self._x = np.asarray(x, dtype=np.float64)
        b = self.bias.value if self.bias is not None else None
        return ops.conv2d(self._x, self.weight.value, b, self.stride,
                          self.padding, self.dilation, self.groups)

    def backward(self, gy):
        gx, gw, gb = ops.conv2d_backward(
            self._x, self.weight.value, gy, self.stride, self.padding,
            self.dilation, self.groups, with_bias=self.bias is not None)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx


class Linear(Layer):
    def __init__(self, in_d, out_d, rng=None, zero_init=False):
        shape = (out_d, in_d)
        if zero_init or rng is None:
            w = np.zeros(shape)
        else:
            w = uniform_init(rng, shape, in_d)
        self.weight = Param(w)
        self.bias = Param(np.zeros(out_d))
        self._x = None

    def forward(self, x):
        self._x = np.asarray(x, dtype=np.float64)
        return ops.fully_connected(self._x, self.weight.value, self.bias.value)

    def backward(self, gy):
        gx, gw, gb = ops.fully_connected_backward(self._x, self.weight.value, gy)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class Activation(Layer):
    def __init__(self, kind):
        self.kind = kind
        self._x = None

    def forward(self, x):
        self._x = np.asarray(x, dtype=np.float64)
        return ops.activation(self.kind, self._x)

    def backward(self, gy):
        return ops.activation_backward(self.kind, self._x, gy)


class BatchNorm2d(Layer):
    """Inference-mode batchnorm: running statistics are fixed buffers."""

    def __init__(self, c, eps=1e-5):
        self.eps = eps
        self.scale = Param(np.ones(c))
        self.shift = Param(np.zeros(c))
        self.mean = Param(np.zeros(c), trainable=False)
        self.var = Param(np.ones(c), trainable=False)
        self._x = None

    def forward(self, x):
        self._x = np.asarray(x, dtype=np.float64)
        return ops.batchnorm_inference(
            self._x, self.scale.value, self.shift.value,
            self.mean.value, self.var.value, self.eps)

    def backward(self, gy):
        gx, gs, gb = ops.batchnorm_inference_backward(
            self._x, self.scale.value, self.shift.value,
            self.mean.value, self.var.value, gy, self.eps)
        self.scale.grad += gs
        self.shift.grad += gb
        return gx


class MaxPool(Layer):
    def __init__(self, k):
        self.k = k
        self._x = None

    def forward(self, x):
        self._x = np.asarray(x, dtype=np.float64)
        return ops.max_pool2d(self._x, self.k)

    def backward(self, gy):
        return ops.max_pool2d_backward(self._x, self.k, gy)


class UpsampleNearest2x(Layer):
    def forward(self, x):
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)

    def backward(self, gy):
        n, c, h2, w2 = gy.shape
        return gy.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


class Sequential(Layer):
    def __init__(self, *stages):
        self.stages = list(stages)

    def forward(self, x):
        for s in self.stages:
            x = s.forward(x)
        return x

    def backward(self, gy):
        for s in reversed(self.stages):
            gy = s.backward(gy)
        return gy


def conv_block(in_c, out_c, k, rng, act="leaky_relu", stride=1, depthwise=False):
    """Conv + activation; spatial convs become depthwise+pointwise pairs
    when depthwise is set (the mobile variant)."""
    if depthwise and k > 1:
        stages = [
            Conv2d(in_c, in_c, k, rng, stride=stride, groups=in_c),
            Conv2d(in_c, out_c, 1, rng),
        ]
    else:
        stages = [Conv2d(in_c, out_c, k, rng, stride=stride)]
    if act is not None:
        stages.append(Activation(act))
    return Sequential(*stages)


def sgd_step(model, lr):
    for p in model.params():
        if p.trainable:
            p.value -= lr * p.grad
