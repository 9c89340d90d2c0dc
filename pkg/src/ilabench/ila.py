"""Intermediate Level Attack: projection/flexible losses, the fine-tuning
loop, per-layer disturbance curves and latest-peak layer selection.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .attacks import CHUNK, AdversarialBatch, PerturbationBudget, project_linf
from .engine import Tape, Tensor
from .errors import ConfigError, DegenerateError, DimensionError, SelectionError

LOSS_KINDS = ("ilap", "ilaf")


@dataclass(frozen=True)
class IlaConfig:
    layer: int
    loss_kind: str = "ilap"
    alpha: float = 1.0
    budget: PerturbationBudget = PerturbationBudget()
    lr: float = 0.006
    n_iters: int = 10
    denom_guard: float = 1e-12

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.loss_kind == "ilaf" and not self.alpha > 0:
            raise ConfigError("ILAF needs alpha > 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.n_iters < 1:
            raise ConfigError("n_iters must be >= 1")
        if not self.denom_guard > 0:
            raise ConfigError("denom_guard must be positive")

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


def _rows(a):
    return a.reshape(1, -1) if a.ndim == 1 else a


@dataclass(eq=False)
class FeatureDelta:
    """Reference delta F_l(x') - F_l(x) and current delta F_l(x'') - F_l(x).

    ``reference`` is a constant array; ``current`` may be a Tensor on a tape.
    Both are (N, D) or (D,).
    """

    reference: np.ndarray
    current: object

    def __post_init__(self):
        self.reference = np.asarray(self.reference)
        cur = self.current if isinstance(self.current, Tensor) else Tensor(self.current)
        if cur.shape != self.reference.shape:
            raise DimensionError(f"feature deltas differ in shape: {cur.shape} vs {self.reference.shape}")
        if cur.ndim == 1:
            cur = E.reshape(cur, (1, -1))
        self.current = cur
        self.reference = _rows(self.reference).astype(cur.dtype, copy=False)

    @property
    def reference_norms(self):
        return np.linalg.norm(self.reference.astype(np.float64), axis=1)

    @property
    def current_norms(self):
        return np.linalg.norm(self.current.data.astype(np.float64), axis=1)


def ilap_loss(delta):
    """Projection loss: minus the dot product of the current and reference deltas."""
    return E.neg(E.sum(E.row_dot(delta.current, Tensor(delta.reference, dtype=delta.current.dtype))))


def ilaf_loss(delta, alpha, guard=1e-12):
    """Flexible loss, summed over rows.

    ``-alpha |cur| / (|ref| + guard) - (cur / (|cur| + guard)) . (ref / (|ref| + guard))``
    """
    ref_norm = delta.reference_norms
    if (ref_norm == 0).any():
        raise DegenerateError(f"zero reference norm in rows {np.flatnonzero(ref_norm == 0).tolist()[:10]}")
    cur = delta.current
    dt = cur.dtype
    ref_den = (ref_norm + guard).astype(dt)
    cur_norm = E.row_norm(cur)
    magnitude = E.div(cur_norm, Tensor(ref_den, dtype=dt))
    ref_unit = Tensor(delta.reference / ref_den[:, None], dtype=dt)
    direction = E.div(E.row_dot(cur, ref_unit), E.add(cur_norm, float(guard)))
    per_row = E.add(E.mul(magnitude, float(alpha)), direction)
    return E.neg(E.sum(per_row))


def _loss(config, delta):
    if config.loss_kind == "ilap":
        return ilap_loss(delta)
    return ilaf_loss(delta, config.alpha, config.denom_guard)


def _endpoint(model, x, layer):
    with E.no_grad():
        return model.forward_to_endpoint(x, layer).data


def ila_step(model, x_cur, x, reference, config, y0=None):
    """One Algorithm-1 update: signed descent on the loss, then projection.

    ``reference`` is the constant delta F_l(x') - F_l(x); ``y0`` may pass a
    precomputed F_l(x).  Returns ``(next iterate, loss value)``.
    """
    if y0 is None:
        y0 = _endpoint(model, x, config.layer)
    with Tape():
        xt = Tensor(x_cur, requires_grad=True, dtype=x_cur.dtype)
        cur = E.sub(model.forward_to_endpoint(xt, config.layer), Tensor(y0, dtype=x_cur.dtype))
        loss = _loss(config, FeatureDelta(reference, cur))
        E.backward(loss)
    lr = np.asarray(config.lr, dtype=x_cur.dtype)
    return project_linf(x_cur - lr * np.sign(xt.grad), x, config.budget), float(loss.data)


def _ila_chunk(model, x, x_ref, config, trajectory):
    layer = config.layer
    y0 = _endpoint(model, x, layer)
    ref = _endpoint(model, x_ref, layer) - y0
    ref_norm = np.linalg.norm(ref.astype(np.float64), axis=1)
    degenerate = ref_norm == 0
    valid = np.flatnonzero(~degenerate)
    out = x.copy()
    seed_proj = np.einsum("nd,nd->n", ref.astype(np.float64), ref.astype(np.float64))
    final_proj = np.zeros(len(x))
    if valid.size == 0:
        return out, degenerate, seed_proj, final_proj
    xv, y0v, refv = x[valid], y0[valid], ref[valid]
    x2 = xv.copy()
    for it in range(config.n_iters):
        x2, value = ila_step(model, x2, xv, refv, config, y0v)
        trajectory[it] += value
    final = _endpoint(model, x2, layer) - y0v
    final_proj[valid] = np.einsum("nd,nd->n", final.astype(np.float64), refv.astype(np.float64))
    out[valid] = x2
    return out, degenerate, seed_proj, final_proj


def ila_attack(model, x, x_ref, labels, config):
    """Fine-tune reference adversarials ``x_ref`` at endpoint ``config.layer``.

    Starts from ``x`` itself, takes ``n_iters`` signed descent steps on the
    chosen loss and re-projects after each.  Images whose reference delta is
    zero are flagged in ``extras["degenerate"]`` and returned unchanged.
    ``extras`` also holds the summed loss per iteration and the per-image
    projections of the seed and the final iterate onto the reference delta.
    """
    if not 0 <= config.layer < len(model.endpoints):
        model.forward_to_endpoint(np.zeros((1, *model.spec.input_shape), np.float32), config.layer)
    x = np.asarray(x)
    dtype = model.parameters()[0].data.dtype
    x = x.astype(dtype, copy=False)
    x_ref = np.asarray(x_ref).astype(dtype, copy=False)
    if x_ref.shape != x.shape:
        raise DimensionError(f"reference batch shape {x_ref.shape} != {x.shape}")
    overshoot = np.abs(x_ref - x).max(initial=0.0) - config.budget.epsilon
    if overshoot > 1e-6:
        warnings.warn(f"reference adversarials leave the epsilon ball by {overshoot:.2e}; projecting",
                      stacklevel=2)
        x_ref = project_linf(x_ref, x, config.budget)
    trajectory = [0.0] * config.n_iters
    parts = [_ila_chunk(model, x[i : i + CHUNK], x_ref[i : i + CHUNK], config, trajectory)
             for i in range(0, len(x), CHUNK)]
    x_adv = np.concatenate([p[0] for p in parts]) if parts else x.copy()
    extras = {
        "degenerate": np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, bool),
        "seed_projection": np.concatenate([p[2] for p in parts]) if parts else np.zeros(0),
        "final_projection": np.concatenate([p[3] for p in parts]) if parts else np.zeros(0),
        "loss_trajectory": trajectory,
        "layer": config.layer,
    }
    labels = np.asarray(labels)
    clean = model.predict(x)
    adv = model.predict(x_adv)
    return AdversarialBatch(x, x_adv, labels, config.loss_kind, config.to_dict(),
                            adv != labels, clean, adv, extras)


# ---------------------------------------------------------------------------
# disturbance curves and layer selection


@dataclass(eq=False)
class DisturbanceCurve:
    """Mean per-image ratio |F_l(x_adv) - F_l(x)| / |F_l(x_ref) - F_l(x)| per endpoint."""

    values: list
    n_valid: list
    target_layer: int | None = None
    source: str = ""
    provenance: str = ""
    flagged: list = field(default_factory=list)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def csv_rows(self):
        return [
            (self.target_layer if self.target_layer is not None else -1, l, v, n)
            for l, (v, n) in enumerate(zip(self.values, self.n_valid))
        ]


def _endpoint_norms(model, x, x_adv, x_ref):
    """Per-image delta norms at every endpoint: two (L, N) arrays."""
    num, den = [], []
    for i in range(0, len(x), CHUNK):
        with E.no_grad():
            base = model.forward_endpoints(x[i : i + CHUNK])
            test = model.forward_endpoints(x_adv[i : i + CHUNK])
            ref = model.forward_endpoints(x_ref[i : i + CHUNK])
        n = len(base[0].data)
        num.append([np.linalg.norm((t.data - b.data).reshape(n, -1).astype(np.float64), axis=1)
                    for b, t in zip(base, test)])
        den.append([np.linalg.norm((r.data - b.data).reshape(n, -1).astype(np.float64), axis=1)
                    for b, r in zip(base, ref)])
    return (np.concatenate([np.stack(p) for p in num], axis=1),
            np.concatenate([np.stack(p) for p in den], axis=1))


def disturbance_curve(model, x, x_adv, x_ref, target_layer=None, source="", provenance=""):
    """Disturbance of ``x_adv`` relative to the reference ``x_ref`` at every endpoint.

    Ratios are taken per image and then averaged.  Images with a zero
    reference norm at an endpoint are skipped there; an endpoint with no
    valid image is flagged and its value is NaN.
    """
    x, x_adv, x_ref = (np.asarray(a) for a in (x, x_adv, x_ref))
    if not (x.shape == x_adv.shape == x_ref.shape):
        raise DimensionError("x, x_adv and x_ref must share a shape")
    num, den = _endpoint_norms(model, x, x_adv, x_ref)
    return curve_from_norms(num, den, target_layer, source, provenance)


def disturbance_from_deltas(test_deltas, ref_deltas):
    """Disturbance curve from per-endpoint delta arrays, each (N, ...)."""
    num = np.stack([np.linalg.norm(np.asarray(d, np.float64).reshape(len(d), -1), axis=1) for d in test_deltas])
    den = np.stack([np.linalg.norm(np.asarray(d, np.float64).reshape(len(d), -1), axis=1) for d in ref_deltas])
    return curve_from_norms(num, den)


def curve_from_norms(num, den, target_layer=None, source="", provenance=""):
    """Mean of per-image ratios ``num / den`` per endpoint; rows are endpoints."""
    values, counts, flagged = [], [], []
    for l in range(num.shape[0]):
        ok = den[l] > 0
        counts.append(int(ok.sum()))
        if ok.any():
            values.append(float(np.mean(num[l][ok] / den[l][ok])))
        else:
            values.append(float("nan"))
            flagged.append(l)
    return DisturbanceCurve(values, counts, target_layer, source, provenance, flagged)


def find_peaks(values):
    """Interior indices i with f(i) > f(i-1) and f(i) >= f(i+1)."""
    f = list(values)
    return [i for i in range(1, len(f) - 1) if f[i] > f[i - 1] and f[i] >= f[i + 1]]


def select_layer(curves):
    """Latest-peak layer selection.

    ``curves`` maps each candidate target layer ``l`` to the disturbance
    curve of an ILAP attack aimed at ``l``.  A candidate exhibits a peak if
    its curve peaks at some index >= l - 1; the largest such ``l`` wins.
    Without any peak, the candidate whose curve is highest at its own
    target layer is returned.

    A plain sequence of numbers is treated as one summary curve: the latest
    peak index is returned, falling back to the arg-max.
    """
    if not isinstance(curves, dict):
        f = [float(v) for v in curves]
        if len(f) < 3:
            raise SelectionError("need at least 3 endpoints to define a peak")
        peaks = find_peaks(f)
        return peaks[-1] if peaks else int(np.nanargmax(f))
    if not curves:
        raise SelectionError("no candidate curves")
    length = len(next(iter(curves.values())))
    if length < 3:
        raise SelectionError("need at least 3 endpoints to define a peak")
    chosen = [l for l, c in curves.items() if any(p >= l - 1 for p in find_peaks(c.values))]
    if chosen:
        return max(chosen)
    return max(curves, key=lambda l: (np.nan_to_num(curves[l].values[l], nan=-np.inf), -l))


def auto_select_layer(model, x, x_ref, labels, base_config, candidates=None, keep_batches=False):
    """Run ILAP at every candidate endpoint and pick one with :func:`select_layer`.

    Returns ``(layer, trace)`` where ``trace[l]`` holds the curve (and,
    when ``keep_batches``, the adversarial batch) of the attack at ``l``.
    """
    if candidates is None:
        candidates = range(len(model.endpoints))
    trace = {}
    for l in candidates:
        cfg = dataclasses.replace(base_config, layer=int(l))
        batch = ila_attack(model, x, x_ref, labels, cfg)
        curve = disturbance_curve(model, batch.originals, batch.adversarials, x_ref, target_layer=int(l),
                                  source=model.spec.arch_id, provenance=f"{cfg.loss_kind}@{l}")
        trace[int(l)] = {"curve": curve, "batch": batch if keep_batches else None}
    layer = select_layer({l: t["curve"] for l, t in trace.items()})
    return layer, trace


def curves_to_csv(curves):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target_layer", "eval_layer", "mean_ratio", "n_valid_images"])
    for curve in curves:
        for t, l, v, n in curve.csv_rows():
            w.writerow([t, l, f"{v:.4f}" if np.isfinite(v) else "nan", n])
    return buf.getvalue()
