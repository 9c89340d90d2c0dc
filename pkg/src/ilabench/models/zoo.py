"""Small CNN architectures with named, attackable endpoints.

Every architecture is a list of stages executed in order.  The output of
stage ``l`` is endpoint ``l``; the last stage produces the logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import engine as E
from ..engine import Tensor
from ..errors import ConfigError, DimensionError, EndpointError, FrozenModelError
from .layers import BasicBlock, BatchNorm2d, Conv2d, Dense, Module, Normalize, parameter_list

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
INPUT_SHAPE = (3, 32, 32)

ENDPOINT_NAMES = {
    "mini_cnn": ("conv", "block1", "block2", "block3", "linear"),
    "mini_vgg": ("block1", "block2", "block3", "block4", "linear"),
    "mini_resnet": ("conv", "bn", "layer1", "layer2", "layer3", "layer4", "linear"),
    "mini_resnet_var1": ("conv", "bn", "layer1", "layer2", "layer3", "layer4",
                         "fc_extra1", "fc_extra2", "fc_extra3", "linear"),
    "mini_resnet_var2": ("conv", "bn", "layer1", "layer2", "layer3", "layer4",
                         "fc_extra1", "fc_extra2", "fc_extra3", "linear"),
}
ARCH_IDS = tuple(ENDPOINT_NAMES)


@dataclass(frozen=True)
class ModelSpec:
    arch_id: str
    num_classes: int = 10
    width_multiplier: float = 1.0
    input_shape: tuple = INPUT_SHAPE
    mean: tuple = CIFAR_MEAN
    std: tuple = CIFAR_STD

    def __post_init__(self):
        if self.arch_id not in ENDPOINT_NAMES:
            raise ConfigError(f"unknown arch_id {self.arch_id!r}; expected one of {ARCH_IDS}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if not self.width_multiplier > 0:
            raise ConfigError("width_multiplier must be positive")


@dataclass(frozen=True)
class LayerEndpoint:
    index: int
    name: str
    shape: tuple  # per-example shape before flattening

    @property
    def size(self):
        return int(np.prod(self.shape))


def _ch(base, width):
    return max(1, int(round(base * width)))


class _Net(Module):
    def __init__(self):
        super().__init__()
        self.stages = []

    def stage(self, name, fn):
        self.stages.append((name, fn))


def _mini_cnn(rng, spec):
    w = spec.width_multiplier
    c1, c2, c3 = _ch(32, w), _ch(64, w), _ch(128, w)
    net = _Net()
    net.conv0 = Conv2d(rng, 3, c1)
    net.conv1 = Conv2d(rng, c1, c1)
    net.conv2 = Conv2d(rng, c1, c2)
    net.conv3 = Conv2d(rng, c2, c3)
    net.fc = Dense(rng, c3 * 4 * 4, spec.num_classes, gain=1.0)
    net.stage("conv", lambda x: E.relu(net.conv0(x)))
    net.stage("block1", lambda x: E.maxpool2x2(E.relu(net.conv1(x))))
    net.stage("block2", lambda x: E.maxpool2x2(E.relu(net.conv2(x))))
    net.stage("block3", lambda x: E.maxpool2x2(E.relu(net.conv3(x))))
    net.stage("linear", lambda x: net.fc(E.flatten(x)))
    return net


def _mini_vgg(rng, spec):
    w = spec.width_multiplier
    widths = [_ch(c, w) for c in (16, 32, 64, 128)]
    net = _Net()
    cin = 3
    for b, cout in enumerate(widths, start=1):
        convs = []
        for k in (1, 2):
            conv = Conv2d(rng, cin, cout, bias=False)
            bn = BatchNorm2d(cout)
            setattr(net, f"block{b}_conv{k}", conv)
            setattr(net, f"block{b}_bn{k}", bn)
            convs.append((conv, bn))
            cin = cout

        def run(x, convs=convs):
            for conv, bn in convs:
                x = E.relu(bn(conv(x)))
            return E.maxpool2x2(x)

        net.stage(f"block{b}", run)
    net.fc = Dense(rng, cin, spec.num_classes, gain=1.0)
    net.stage("linear", lambda x: net.fc(E.avgpool_global(x)))
    return net


def _mini_resnet(rng, spec, extra=None):
    w = spec.width_multiplier
    widths = [_ch(c, w) for c in (16, 32, 64, 128)]
    net = _Net()
    net.conv = Conv2d(rng, 3, widths[0], bias=False)
    net.bn = BatchNorm2d(widths[0])
    net.stage("conv", net.conv)
    net.stage("bn", lambda x: E.relu(net.bn(x)))
    cin = widths[0]
    for i, cout in enumerate(widths, start=1):
        block = BasicBlock(rng, cin, cout, stride=1 if i == 1 else 2)
        setattr(net, f"layer{i}", block)
        net.stage(f"layer{i}", block)
        cin = cout
    if extra is None:
        net.fc = Dense(rng, cin, spec.num_classes, gain=1.0)
        net.stage("linear", lambda x: net.fc(E.avgpool_global(x)))
        return net
    act = E.relu if extra == "relu" else (lambda t: t)
    for k in (1, 2, 3):
        layer = Dense(rng, cin, cin, gain=6.0 if extra == "relu" else 3.0)
        setattr(net, f"fc_extra{k}", layer)
        if k == 1:
            net.stage("fc_extra1", lambda x, layer=layer: act(layer(E.avgpool_global(x))))
        else:
            net.stage(f"fc_extra{k}", lambda x, layer=layer: act(layer(x)))
    net.fc = Dense(rng, cin, spec.num_classes, gain=1.0)
    net.stage("linear", lambda x: net.fc(x))
    return net


_BUILDERS = {
    "mini_cnn": _mini_cnn,
    "mini_vgg": _mini_vgg,
    "mini_resnet": _mini_resnet,
    "mini_resnet_var1": lambda rng, spec: _mini_resnet(rng, spec, extra="linear"),
    "mini_resnet_var2": lambda rng, spec: _mini_resnet(rng, spec, extra="relu"),
}


class ModelHandle:
    """A network plus its spec, endpoint registry and frozen flag."""

    def __init__(self, spec, net, normalize):
        self.spec = spec
        self.net = net
        self.normalize = normalize
        self.frozen = False
        self.endpoints = ()
        self.net.train(False)

    # -- state -------------------------------------------------------------
    def parameters(self):
        return parameter_list(self.net)

    def named_state(self):
        """Every persisted array in a fixed order: parameters, then buffers."""
        items = [(name, t.data) for name, t in self.net.named_parameters()]
        items += [(f"normalize.{name}", arr) for name, arr in self.normalize.named_buffers()]
        items += list(self.net.named_buffers())
        return items

    def load_state(self, arrays):
        own = dict(self.named_state())
        if set(own) != set(arrays):
            missing = sorted(set(own) - set(arrays))
            extra = sorted(set(arrays) - set(own))
            raise ConfigError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, target in own.items():
            src = np.asarray(arrays[name])
            if src.shape != target.shape:
                raise DimensionError(f"{name}: shape {src.shape} != {target.shape}")
            if not target.flags.writeable:
                raise FrozenModelError("cannot load state into a frozen model")
            target[...] = src

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))

    @property
    def training(self):
        return self.net.training

    def train(self, mode=True):
        if mode and self.frozen:
            raise FrozenModelError("frozen models cannot enter training mode")
        self.net.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def freeze(self):
        """Switch to eval mode and make every parameter and buffer read-only."""
        self.net.train(False)
        for _, t in self.net.named_parameters():
            t.requires_grad = False
            t.grad = None
            t.data.flags.writeable = False
        for _, arr in self.named_state():
            arr.flags.writeable = False
        self.frozen = True
        return self

    # -- forward -----------------------------------------------------------
    def _check_input(self, x):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=E.get_default_dtype())
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise DimensionError(
                f"expected input of shape (N, {', '.join(map(str, self.spec.input_shape))}), got {x.shape}"
            )
        return x

    def forward_endpoints(self, x, upto=None):
        """Run stages ``0..upto`` and return their (unflattened) outputs."""
        x = self._check_input(x)
        last = len(self.net.stages) - 1 if upto is None else upto
        outs = []
        h = self.normalize(x)
        for _, fn in self.net.stages[: last + 1]:
            h = fn(h)
            outs.append(h)
        return outs

    def forward_logits(self, x):
        return self.forward_endpoints(x)[-1]

    def forward_to_endpoint(self, x, l):
        n = len(self.endpoints)
        if not 0 <= l < n:
            names = ", ".join(f"{e.index}:{e.name}" for e in self.endpoints)
            raise EndpointError(f"endpoint {l} out of range; valid endpoints are {names}")
        return E.flatten(self.forward_endpoints(x, upto=l)[-1])

    def endpoint_index(self, name_or_index):
        if isinstance(name_or_index, (int, np.integer)):
            return int(name_or_index)
        for e in self.endpoints:
            if e.name == name_or_index:
                return e.index
        raise EndpointError(f"unknown endpoint {name_or_index!r}; valid: {[e.name for e in self.endpoints]}")

    def predict(self, x, batch_size=500):
        """Arg-max labels for a numpy batch, computed without a tape."""
        x = np.asarray(x)
        preds = []
        with E.no_grad():
            for i in range(0, len(x), batch_size):
                preds.append(self.forward_logits(x[i : i + batch_size]).data.argmax(axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def __repr__(self):
        state = "frozen" if self.frozen else ("train" if self.training else "eval")
        return f"ModelHandle({self.spec.arch_id}, {self.num_parameters()} params, {state})"


def build_model(spec, seed=0):
    """Construct ``spec.arch_id`` with fan-in-scaled uniform init from ``seed``."""
    if isinstance(spec, str):
        spec = ModelSpec(spec)
    if spec.arch_id not in _BUILDERS:
        raise ConfigError(f"unknown arch_id {spec.arch_id!r}")
    rng = np.random.default_rng(seed)
    net = _BUILDERS[spec.arch_id](rng, spec)
    handle = ModelHandle(spec, net, Normalize(spec.mean, spec.std))
    names = ENDPOINT_NAMES[spec.arch_id]
    assert tuple(n for n, _ in net.stages) == names
    with E.no_grad():
        outs = handle.forward_endpoints(np.zeros((1, *spec.input_shape)))
    handle.endpoints = tuple(
        LayerEndpoint(i, name, tuple(o.shape[1:])) for i, (name, o) in enumerate(zip(names, outs))
    )
    return handle


def set_extra_layers_identity(model):
    """Make the three appended fc layers of a var1/var2 model identity maps."""
    for k in (1, 2, 3):
        layer = getattr(model.net, f"fc_extra{k}", None)
        if layer is None:
            raise ConfigError(f"{model.spec.arch_id} has no appended fc layers")
        layer.weight.data[...] = np.eye(layer.weight.shape[0])
        layer.bias.data[...] = 0


def to_dtype(model, dtype):
    """Cast every parameter and buffer of an unfrozen model in place."""
    if model.frozen:
        raise FrozenModelError("cannot cast a frozen model")
    for _, t in model.net.named_parameters():
        t.data = t.data.astype(dtype)
    for m in list(model.net.modules()) + [model.normalize]:
        for name, arr in list(m._buffers.items()):
            new = arr.astype(dtype)
            m._buffers[name] = new
            for attr, val in list(vars(m).items()):
                if val is arr:
                    object.__setattr__(m, attr, new)
    return model
