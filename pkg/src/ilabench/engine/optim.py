from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, FrozenModelError


@dataclass(eq=False)
class Parameter:
    """A named trainable tensor, e.g. ``layer2.conv1.weight``."""

    name: str
    tensor: object

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


def sgd_step(params, grads=None, lr=0.01, momentum=0.0, weight_decay=0.0, state=None):
    """One SGD update with classical (heavy-ball) momentum.

    ``v <- momentum * v + (g + weight_decay * w)``, then ``w <- w - lr * v``.
    ``grads`` defaults to each parameter's ``.grad``; ``state`` maps parameter
    names to velocity buffers and is updated in place.
    """
    if lr <= 0:
        raise ConfigError(f"sgd_step: lr must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ConfigError(f"sgd_step: momentum must lie in [0, 1), got {momentum}")
    if state is None:
        state = {}
    for i, p in enumerate(params):
        g = p.grad if grads is None else grads[i]
        if g is None:
            continue
        w = p.data
        if not w.flags.writeable:
            raise FrozenModelError(f"parameter {p.name} belongs to a frozen model")
        step = g + weight_decay * w if weight_decay else g
        if momentum:
            v = state.get(p.name)
            if v is None:
                v = np.array(step, dtype=w.dtype, copy=True)
            else:
                v *= momentum
                v += step
            state[p.name] = v
            step = v
        w -= (lr * step).astype(w.dtype, copy=False)
    return state


class SGD:
    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state = {}

    def zero_grad(self):
        for p in self.params:
            p.tensor.grad = None

    def step(self):
        sgd_step(self.params, lr=self.lr, momentum=self.momentum,
                 weight_decay=self.weight_decay, state=self.state)
