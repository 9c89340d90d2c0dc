"""Parameterised building blocks on top of the engine primitives."""

from __future__ import annotations

import numpy as np

from .. import engine as E
from ..engine import Parameter, Tensor


class Module:
    """Holds named parameters, buffers and child modules."""

    def __init__(self):
        self._params = {}
        self._buffers = {}
        self._children = {}
        self.training = False

    def __setattr__(self, key, value):
        if isinstance(value, Module) and key != "_children":
            self.__dict__.setdefault("_children", {})[key] = value
        object.__setattr__(self, key, value)

    def add_param(self, name, array):
        t = Tensor(array, requires_grad=True, dtype=E.get_default_dtype(), name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name, array):
        arr = np.asarray(array, dtype=E.get_default_dtype()).copy()
        self._buffers[name] = arr
        return arr

    def named_parameters(self, prefix=""):
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, arr in self._buffers.items():
            yield prefix + name, arr
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, k=3, stride=1, padding=1, bias=True):
        super().__init__()
        fan_in = cin * k * k
        self.weight = self.add_param("weight", _uniform(rng, (cout, cin, k, k), np.sqrt(6.0 / fan_in)))
        self.bias = self.add_param("bias", np.zeros(cout)) if bias else None
        self.stride, self.padding = stride, padding

    def __call__(self, x):
        return E.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Dense(Module):
    def __init__(self, rng, fin, fout, gain=6.0):
        super().__init__()
        self.weight = self.add_param("weight", _uniform(rng, (fout, fin), np.sqrt(gain / fin)))
        self.bias = self.add_param("bias", np.zeros(fout))

    def __call__(self, x):
        return E.dense(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.gamma = self.add_param("weight", np.ones(channels))
        self.beta = self.add_param("bias", np.zeros(channels))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels))
        self.running_var = self.add_buffer("running_var", np.ones(channels))
        self.momentum, self.eps = momentum, eps

    def __call__(self, x):
        return E.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training=self.training, momentum=self.momentum, eps=self.eps)


class Normalize(Module):
    """Fixed per-channel ``(x - mean) / std``; lives inside the model."""

    def __init__(self, mean, std):
        super().__init__()
        self.mean = self.add_buffer("mean", mean)
        self.std = self.add_buffer("std", std)

    def __call__(self, x):
        n, c, h, w = x.shape
        shift = Tensor(np.broadcast_to(self.mean[None, :, None, None], x.shape), dtype=x.dtype)
        scale = Tensor(np.broadcast_to((1.0 / self.std)[None, :, None, None], x.shape), dtype=x.dtype)
        return E.mul(E.sub(x, shift), scale)


class BasicBlock(Module):
    """Two 3x3 conv-BN layers with an identity or 1x1 projection shortcut."""

    def __init__(self, rng, cin, cout, stride=1):
        super().__init__()
        self.conv1 = Conv2d(rng, cin, cout, 3, stride, 1, bias=False)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(rng, cout, cout, 3, 1, 1, bias=False)
        self.bn2 = BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.shortcut = Conv2d(rng, cin, cout, 1, stride, 0, bias=False)
            self.shortcut_bn = BatchNorm2d(cout)
        else:
            self.shortcut = None

    def __call__(self, x):
        out = E.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x))
        return E.relu(E.residual_add(out, skip))


def parameter_list(module):
    return [Parameter(name, t) for name, t in module.named_parameters()]
