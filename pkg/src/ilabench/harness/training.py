"""Seeded SGD training loop for the model zoo."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import engine as E
from ..data import batch_iter
from ..engine import SGD, Tape, Tensor
from ..errors import ConfigError, NumericError
from ..models import save_model

SCHEDULES = ("constant", "step", "cosine")
# mini_cnn has no batch normalisation and diverges at the larger rate
DEFAULT_LR = {"mini_cnn": 0.01}


def default_lr(arch_id):
    return DEFAULT_LR.get(arch_id, 0.05)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    lr: float = 0.05
    schedule: str = "cosine"
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    flip: bool = True
    crop: bool = True
    seed: int = 0
    warmup_epochs: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if not self.lr > 0 or self.batch_size < 1:
            raise ConfigError("lr must be positive and batch_size >= 1")

    def to_dict(self):
        return asdict(self)


def lr_at(config, epoch):
    """Learning rate used during ``epoch`` (0-based)."""
    if config.schedule == "constant":
        return config.lr
    if config.schedule == "step":
        frac = epoch / config.epochs
        return config.lr * (0.1 ** ((frac >= 0.5) + (frac >= 0.75)))
    return 0.5 * config.lr * (1 + math.cos(math.pi * epoch / config.epochs))


def augment(images, rng, flip=True, crop=True, pad=4):
    """Random horizontal flips and zero-padded random crops."""
    out = images.copy()
    n, _, h, w = out.shape
    if flip:
        mask = rng.random(n) < 0.5
        out[mask] = out[mask, :, :, ::-1]
    if crop:
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy = rng.integers(0, 2 * pad + 1, n)
        dx = rng.integers(0, 2 * pad + 1, n)
        for i in range(n):
            out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    return out


def accuracy(model, ds):
    """Percentage of ``ds`` classified correctly."""
    if len(ds) == 0:
        return float("nan")
    return 100.0 * float(np.mean(model.predict(ds.images) == ds.labels))


@dataclass
class TrainResult:
    model: object
    log: list = field(default_factory=list)
    diverged: bool = False


def train_model(model, train_ds, test_ds, config=TrainConfig(), checkpoint=None, log_fn=None):
    """Train ``model`` in place and return it frozen.

    The learning rate ramps up linearly over the first ``warmup_epochs``.
    Each epoch appends ``{epoch, lr, loss, train_acc, test_acc}`` to the log.
    A non-finite loss restores the last completed epoch's weights, saves
    them to ``checkpoint`` (if given) and raises :class:`NumericError`.
    """
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = SGD(params, config.lr, config.momentum, config.weight_decay)
    log = []
    good = [np.array(a, copy=True) for _, a in model.named_state()]
    for epoch in range(config.epochs):
        opt.lr = lr_at(config, epoch)
        model.train(True)
        total, correct, seen = 0.0, 0, 0
        shuffle = int(rng.integers(0, 2**31))
        steps = -(-len(train_ds) // config.batch_size)
        for step, (xb, yb) in enumerate(batch_iter(train_ds, config.batch_size, shuffle_seed=shuffle)):
            if epoch < config.warmup_epochs:
                opt.lr = lr_at(config, epoch) * (epoch * steps + step + 1) / (config.warmup_epochs * steps)
            xb = augment(xb, rng, config.flip, config.crop)
            opt.zero_grad()
            with Tape():
                logits = model.forward_logits(Tensor(xb))
                loss = E.softmax_cross_entropy(logits, yb)
                E.backward(loss)
            value = float(loss.data)
            if not math.isfinite(value):
                _restore(model, good)
                model.freeze()
                if checkpoint:
                    save_model(model, checkpoint)
                raise NumericError(f"loss became {value} in epoch {epoch}; restored last good weights")
            opt.step()
            total += value * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            seen += len(yb)
        model.train(False)
        good = [np.array(a, copy=True) for _, a in model.named_state()]
        entry = {"epoch": epoch + 1, "lr": opt.lr, "loss": total / seen,
                 "train_acc": 100.0 * correct / seen, "test_acc": accuracy(model, test_ds)}
        log.append(entry)
        if log_fn:
            log_fn(entry)
    model.freeze()
    if checkpoint:
        save_model(model, checkpoint)
    return TrainResult(model, log)


def _restore(model, arrays):
    for (_, target), src in zip(model.named_state(), arrays):
        target[...] = src
