"""White-box baseline attacks producing the reference adversarial x'.

All attacks work in raw [0, 1] pixel space against frozen models, use
``sign(0) = 0`` and re-project onto the L-inf ball (then the image range)
after every step.  Losses are summed over the batch so each image's
gradient is independent of batch composition.
"""

from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .engine import Tape, Tensor
from .errors import ConfigError, DegenerateError, DimensionError

BALL_TOL = 1e-6


@dataclass(frozen=True)
class PerturbationBudget:
    epsilon: float = 0.015
    value_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        lo, hi = self.value_range
        if not lo < hi:
            raise ConfigError(f"invalid value range {self.value_range}")


@dataclass(frozen=True)
class AttackConfig:
    budget: PerturbationBudget = PerturbationBudget()
    lr: float = 0.002
    n_iters: int = 20
    momentum_mu: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.n_iters < 1:
            raise ConfigError(f"n_iters must be >= 1, got {self.n_iters}")
        if self.momentum_mu < 0:
            raise ConfigError(f"momentum_mu must be >= 0, got {self.momentum_mu}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["budget"]["value_range"] = list(self.budget.value_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        b = d.pop("budget", {})
        budget = PerturbationBudget(b.get("epsilon", 0.015), tuple(b.get("value_range", (0.0, 1.0))))
        return cls(budget=budget, **d)


@dataclass(eq=False)
class AdversarialBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    labels: np.ndarray
    attack: str
    config: dict
    fooled: np.ndarray
    source_pred_clean: np.ndarray | None = None
    source_pred_adv: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def perturbations(self):
        return self.adversarials - self.originals

    def linf(self):
        d = self.perturbations.reshape(len(self), -1)
        return np.abs(d).max(axis=1) if d.size else np.zeros(len(self))

    def check_invariants(self, epsilon, value_range=(0.0, 1.0), tol=BALL_TOL):
        """Return the number of images violating the ball or range constraint."""
        lo, hi = value_range
        bad_ball = self.linf() > epsilon + tol
        adv = self.adversarials.reshape(len(self), -1)
        bad_range = (adv < lo).any(axis=1) | (adv > hi).any(axis=1)
        return int((bad_ball | bad_range).sum())

    def to_records(self):
        """Adversarials in the 3073-byte record format (pixels rounded to bytes)."""
        from .data import Dataset, to_records

        return to_records(Dataset(self.adversarials.astype(np.float32), np.asarray(self.labels), "adv"))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "label", "source_pred_clean", "source_pred_adv", "Linf_norm"])
        clean = self.source_pred_clean if self.source_pred_clean is not None else np.full(len(self), -1)
        adv = self.source_pred_adv if self.source_pred_adv is not None else np.full(len(self), -1)
        for i, (lab, pc, pa, n) in enumerate(zip(self.labels, clean, adv, self.linf())):
            w.writerow([i, int(lab), int(pc), int(pa), f"{n:.6f}"])
        return buf.getvalue()


@dataclass(frozen=True)
class EnsembleConfig:
    members: tuple
    weights: tuple | None = None
    distance_weight: float = 0.0

    def __post_init__(self):
        if len(self.members) == 0:
            raise ConfigError("ensemble needs at least one member")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if len(w) != len(self.members) or (w <= 0).any():
                raise ConfigError("ensemble weights must be positive, one per member")
            if abs(w.sum() - 1.0) > 1e-6:
                raise ConfigError(f"ensemble weights must sum to 1, got {w.sum()}")
        if self.distance_weight < 0:
            raise ConfigError("distance weight must be >= 0")

    @property
    def resolved_weights(self):
        if self.weights is None:
            return (1.0 / len(self.members),) * len(self.members)
        return tuple(float(w) for w in self.weights)


# ---------------------------------------------------------------------------


def project_linf(x_adv, x, budget):
    """Clamp ``x_adv - x`` to [-eps, eps], add back to ``x``, clamp to the range."""
    x_adv = np.asarray(x_adv)
    x = np.asarray(x)
    if x_adv.shape != x.shape:
        raise DimensionError(f"project_linf: shape mismatch {x_adv.shape} vs {x.shape}")
    eps = np.asarray(budget.epsilon, dtype=x.dtype)
    out = x + np.clip(x_adv - x, -eps, eps)
    lo, hi = budget.value_range
    return np.clip(out, lo, hi).astype(x.dtype, copy=False)


def _as_images(x, model=None):
    x = np.asarray(x)
    if x.ndim != 4:
        raise DimensionError(f"expected an (N, C, H, W) image batch, got {x.shape}")
    return x.astype(np.float32 if model is None else _model_dtype(model), copy=False)


def _model_dtype(model):
    return model.parameters()[0].data.dtype


CHUNK = 128


def chunked(fn, *arrays, chunk=CHUNK):
    """Apply ``fn`` to fixed-size slices along axis 0 and concatenate.

    The slice size is fixed so results never depend on the caller's batch size.
    """
    n = len(arrays[0])
    if n <= chunk:
        return fn(*arrays)
    return np.concatenate([fn(*(a[i : i + chunk] for a in arrays)) for i in range(0, n, chunk)])


def _loss_gradient(model, x, y):
    with Tape():
        xt = Tensor(x, requires_grad=True, dtype=x.dtype)
        loss = E.softmax_cross_entropy(model.forward_logits(xt), y, reduction="sum")
        E.backward(loss)
    return xt.grad


def loss_gradient(model, x, y):
    """d/dx of the summed cross-entropy of ``model`` at ``x``."""
    return chunked(lambda xs, ys: _loss_gradient(model, xs, ys), x, np.asarray(y))


def _finish(model, name, x, x_adv, y, config, extras=None):
    clean = model.predict(x)
    adv = model.predict(x_adv)
    return AdversarialBatch(
        originals=x, adversarials=x_adv, labels=np.asarray(y), attack=name, config=config,
        fooled=adv != np.asarray(y), source_pred_clean=clean, source_pred_adv=adv,
        extras=extras or {},
    )


def fgsm_step(x, grad, budget):
    """``x + eps * sign(grad)``, projected; works on arrays of any shape."""
    x = np.asarray(x)
    step = np.asarray(budget.epsilon, dtype=x.dtype) * np.sign(grad).astype(x.dtype)
    return project_linf(x + step, x, budget)


def fgsm(model, x, y, budget=PerturbationBudget()):
    """One step of size epsilon along the sign of the loss gradient."""
    x = _as_images(x, model)
    x_adv = fgsm_step(x, loss_gradient(model, x, y), budget)
    cfg = {"budget": {"epsilon": budget.epsilon, "value_range": list(budget.value_range)}}
    return _finish(model, "fgsm", x, x_adv, y, cfg)


def _iterate(x, config, grad_fn, direction_fn=None, keep=()):
    """Shared sign-ascent loop; ``keep`` lists iteration counts to snapshot."""
    lr = np.asarray(config.lr, dtype=x.dtype)
    x_adv = x.copy()
    snapshots = {}
    state = None
    for it in range(1, config.n_iters + 1):
        g = grad_fn(x_adv)
        if direction_fn is not None:
            g, state = direction_fn(g, state)
        x_adv = project_linf(x_adv + lr * np.sign(g), x, config.budget)
        if it in keep:
            snapshots[it] = x_adv.copy()
    return x_adv, snapshots


def ifgsm(model, x, y, config=AttackConfig(), snapshot_iters=()):
    """Iterated FGSM: ``n_iters`` steps of ``lr * sign(grad)`` with projection.

    ``snapshot_iters`` stores intermediate iterates in ``extras["snapshots"]``;
    the 10-iteration seed of the transfer protocol is the 10th iterate of the
    20-iteration run.
    """
    x = _as_images(x, model)
    y = np.asarray(y)
    x_adv, snaps = _iterate(x, config, lambda xa: loss_gradient(model, xa, y), keep=snapshot_iters)
    return _finish(model, "ifgsm", x, x_adv, y, config.to_dict(), {"snapshots": snaps} if snaps else None)


def _l1_normalized(g):
    norms = np.abs(g).reshape(len(g), -1).sum(axis=1)
    norms = np.where(norms > 0, norms, 1).astype(g.dtype)
    return g / norms.reshape(-1, *([1] * (g.ndim - 1)))


def mifgsm(model, x, y, config=AttackConfig()):
    """Momentum I-FGSM: ``g <- mu g + grad / |grad|_1``, step along ``sign(g)``."""
    x = _as_images(x, model)
    y = np.asarray(y)
    mu = config.momentum_mu

    def accumulate(grad, acc):
        grad = _l1_normalized(grad)
        acc = grad if acc is None else mu * acc + grad
        return acc, acc

    x_adv, _ = _iterate(x, config, lambda xa: loss_gradient(model, xa, y), accumulate)
    return _finish(model, "mifgsm", x, x_adv, y, config.to_dict())


def ensemble_gradient(ensemble, x_adv, x, y):
    """Gradient of the weighted mean member loss minus the distance penalty."""
    total = None
    for w, member in zip(ensemble.resolved_weights, ensemble.members):
        g = loss_gradient(member, x_adv, y)
        g = g if w == 1.0 else np.asarray(w, dtype=g.dtype) * g
        total = g if total is None else total + g
    lam = ensemble.distance_weight
    if lam:
        d = (x_adv - x).reshape(len(x), -1)
        n = np.linalg.norm(d, axis=1)
        unit = np.where(n[:, None] > 0, d / np.where(n > 0, n, 1)[:, None], 0).reshape(x.shape)
        total = total - np.asarray(lam, dtype=total.dtype) * unit.astype(total.dtype)
    return total


def ensemble_multifool(ensemble, x, y, config=AttackConfig()):
    """Untargeted sign ascent on the weighted mean of member losses.

    With ``distance_weight`` > 0 the L2 distance to ``x`` is penalised.
    ``fooled`` counts how many members misclassify each output.
    """
    if isinstance(ensemble, (list, tuple)):
        ensemble = EnsembleConfig(tuple(ensemble))
    x = _as_images(x, ensemble.members[0])
    y = np.asarray(y)
    x_adv, _ = _iterate(x, config, lambda xa: ensemble_gradient(ensemble, xa, x, y))
    first = ensemble.members[0]
    batch = _finish(first, "multifool", x, x_adv, y, config.to_dict())
    counts = np.zeros(len(y), dtype=np.int64)
    for m in ensemble.members:
        counts += m.predict(x_adv) != y
    batch.extras["fooled_members"] = counts
    return batch


def fooled_member_counts(models, x_adv, y):
    counts = np.zeros(len(y), dtype=np.int64)
    for m in models:
        counts += m.predict(x_adv) != np.asarray(y)
    return counts


def best_transfer_direction(batch, tol=0.0):
    """Per-image unit L2 direction of the perturbation.

    Raises :class:`DegenerateError` naming the offending images when any
    perturbation is zero.
    """
    d = np.asarray(batch.perturbations if hasattr(batch, "perturbations") else batch, dtype=np.float64)
    flat = d.reshape(len(d), -1)
    norms = np.linalg.norm(flat, axis=1)
    zero = np.flatnonzero(norms <= tol)
    if zero.size:
        raise DegenerateError(f"zero perturbation for images {zero.tolist()[:10]}")
    return (flat / norms[:, None]).reshape(d.shape)


ATTACKS = {"fgsm": fgsm, "ifgsm": ifgsm, "mifgsm": mifgsm}
