"""Transfer evaluation, analysis experiments and parameter sweeps."""

from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass, field

import numpy as np

from .. import engine as E
from ..attacks import CHUNK, AttackConfig, EnsembleConfig, PerturbationBudget, ensemble_multifool, ifgsm, mifgsm
from ..errors import ConfigError, DegenerateError, IlaBenchError, InputError
from ..ila import IlaConfig, auto_select_layer, ila_attack
from .batchio import originals_hash
from .reports import AngleProfile, TableReport, TransferReport, TransferRow

# ---------------------------------------------------------------------------
# transfer


def _check_shared(batches):
    hashes = {originals_hash(b.originals) for b in batches}
    if len(hashes) > 1:
        raise InputError("batches do not share the same originals")


def transfer_matrix(batches, targets, source="source", layers=None, selected_layer=None, run_id=""):
    """Accuracy (percent) of every target on every batch, plus clean accuracy.

    ``batches`` maps attack ids to batches; ``targets`` maps names to models.
    ``layers`` optionally maps attack ids to the ILA layer they used.
    """
    if not batches:
        raise InputError("transfer_matrix needs at least one batch")
    batches = dict(batches)
    _check_shared(list(batches.values()))
    classes = {m.spec.num_classes for m in targets.values()}
    if len(classes) > 1:
        raise ConfigError(f"target models disagree on class count: {sorted(classes)}")
    first = next(iter(batches.values()))
    labels = np.asarray(first.labels)
    n = len(labels)
    if n == 0:
        raise InputError("empty batch")
    layers = layers or {}
    report = TransferReport(source, selected_layer=selected_layer, run_id=run_id)
    for tname, model in targets.items():
        acc = 100.0 * float(np.mean(model.predict(first.originals) == labels))
        report.rows.append(TransferRow(source, "clean", tname, None, acc, n))
    for aname, batch in batches.items():
        for tname, model in targets.items():
            acc = 100.0 * float(np.mean(model.predict(batch.adversarials) == labels))
            report.rows.append(TransferRow(source, aname, tname, layers.get(aname), acc, n))
    return report


# ---------------------------------------------------------------------------
# angles


def delta_angles(da, db):
    """Per-row angle in degrees between two (N, D) delta matrices.

    Rows where either delta has zero norm come back as NaN.
    """
    da = np.asarray(da, dtype=np.float64).reshape(len(da), -1)
    db = np.asarray(db, dtype=np.float64).reshape(len(db), -1)
    na = np.linalg.norm(da, axis=1)
    nb = np.linalg.norm(db, axis=1)
    ok = (na > 0) & (nb > 0)
    cos = np.full(len(da), np.nan)
    cos[ok] = np.einsum("nd,nd->n", da[ok], db[ok]) / (na[ok] * nb[ok])
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def angle_by_layer(model, originals, batch_a, batch_b, run_id=""):
    """Mean angle between feature deltas of two perturbation sources per endpoint."""
    xa = getattr(batch_a, "adversarials", batch_a)
    xb = getattr(batch_b, "adversarials", batch_b)
    x = np.asarray(originals)
    if not (x.shape == np.shape(xa) == np.shape(xb)):
        raise InputError("batches must share originals")
    per_layer = [[] for _ in model.endpoints]
    for i in range(0, len(x), CHUNK):
        with E.no_grad():
            base = model.forward_endpoints(x[i : i + CHUNK])
            fa = model.forward_endpoints(xa[i : i + CHUNK])
            fb = model.forward_endpoints(xb[i : i + CHUNK])
        for l, (b0, a1, b1) in enumerate(zip(base, fa, fb)):
            per_layer[l].append(delta_angles(a1.data - b0.data, b1.data - b0.data))
    angles, valid, skipped = [], [], []
    for vals in per_layer:
        v = np.concatenate(vals)
        ok = np.isfinite(v)
        valid.append(int(ok.sum()))
        skipped.append(int((~ok).sum()))
        angles.append(float(v[ok].mean()) if ok.any() else float("nan"))
    return AngleProfile([e.name for e in model.endpoints], angles, valid, skipped, run_id)


def rank_correlation(values):
    """Spearman correlation between position and value, ignoring NaNs."""
    from scipy.stats import spearmanr

    v = np.asarray(values, dtype=np.float64)
    idx = np.arange(len(v))
    ok = np.isfinite(v)
    return float(spearmanr(idx[ok], v[ok]).statistic)


# ---------------------------------------------------------------------------
# decision boundary plane


@dataclass
class BoundaryGrid:
    s: np.ndarray
    t: np.ndarray
    labels: np.ndarray  # (len(t), len(s)): labels[j, i] at (s[i], t[j])
    markers: dict = field(default_factory=dict)

    def rows(self):
        return [(float(s), float(t), int(self.labels[j, i]))
                for j, t in enumerate(self.t) for i, s in enumerate(self.s)]

    def label_at(self, s, t):
        i = int(np.argmin(np.abs(self.s - s)))
        j = int(np.argmin(np.abs(self.t - t)))
        return int(self.labels[j, i])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "t", "predicted_label", "marker"])
        for s, t, lab in self.rows():
            w.writerow([f"{s:.6f}", f"{t:.6f}", lab, ""])
        for name, (s, t, lab) in self.markers.items():
            w.writerow([f"{s:.6f}", f"{t:.6f}", lab, name])
        return buf.getvalue()


def plane_basis(pert_a, pert_b, tol=1e-9):
    """Orthonormal (u, v): u along ``pert_a``, v the Gram-Schmidt residual of ``pert_b``."""
    a = np.asarray(pert_a, dtype=np.float64).ravel()
    b = np.asarray(pert_b, dtype=np.float64).ravel()
    na = np.linalg.norm(a)
    if na == 0:
        raise DegenerateError("pert_a is zero; the plane is undefined")
    u = a / na
    r = b - (b @ u) * u
    nr = np.linalg.norm(r)
    if nr <= tol * max(np.linalg.norm(b), 1.0):
        raise DegenerateError("pert_b is parallel to pert_a; supply a random orthogonal direction as pert_b")
    return u, r / nr


def boundary_grid(model, x, pert_a, pert_b, extent, resolution):
    """Classify ``x + s u + t v`` over ``[-extent, extent]^2`` at resolution^2 points.

    Points are not clipped to the pixel range, so the plane stays linear.
    """
    if resolution < 2:
        raise ConfigError("resolution must be >= 2")
    x = np.asarray(x, dtype=np.float32)
    shape = x.shape
    u, v = plane_basis(pert_a, pert_b)
    grid = np.linspace(-extent, extent, resolution)
    labels = np.empty((resolution, resolution), dtype=np.int64)
    flat = x.astype(np.float64).ravel()
    for j, t in enumerate(grid):
        pts = flat[None, :] + grid[:, None] * u[None, :] + t * v[None, :]
        labels[j] = model.predict(pts.reshape(resolution, *shape).astype(np.float32))
    a = np.asarray(pert_a, dtype=np.float64).ravel()
    b = np.asarray(pert_b, dtype=np.float64).ravel()

    def pred(p):
        return int(model.predict(p.reshape(1, *shape).astype(np.float32))[0])

    markers = {
        "x": (0.0, 0.0, pred(flat)),
        "x+pert_a": (float(a @ u), float(a @ v), pred(flat + a)),
        "x+pert_b": (float(b @ u), float(b @ v), pred(flat + b)),
    }
    return BoundaryGrid(grid, grid.copy(), labels, markers)


# ---------------------------------------------------------------------------
# baseline + ILA transfer pipeline


@dataclass(frozen=True)
class PipelineConfig:
    """Protocol: a 20-iteration baseline for comparison and its 10th iterate as the ILA seed."""

    baseline: str = "ifgsm"
    reference: str = "same"  # "same" seeds ILA with the baseline; "multifool" uses the ensemble
    budget: PerturbationBudget = PerturbationBudget()
    baseline_lr: float = 0.002
    baseline_iters: int = 20
    seed_iters: int = 10
    momentum_mu: float = 1.0
    ila_lr: float = 0.006
    ila_iters: int = 10
    loss_kind: str = "ilap"
    alpha: float = 1.0
    layer: object = "auto"
    all_layers: bool = False

    def attack_config(self):
        return AttackConfig(self.budget, self.baseline_lr, self.baseline_iters, self.momentum_mu)

    def ila_config(self, layer=0):
        return IlaConfig(layer, self.loss_kind, self.alpha, self.budget, self.ila_lr, self.ila_iters)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["budget"]["value_range"] = list(self.budget.value_range)
        return d


@dataclass
class PipelineResult:
    baseline: object
    seed: object
    ila: object
    layer: int
    trace: dict
    report: TransferReport
    per_layer: dict = field(default_factory=dict)


def baseline_with_seed(source, x, y, cfg, ensemble=None):
    """Run the n-iteration baseline and return ``(batch, seed iterate array)``."""
    acfg = cfg.attack_config()
    if cfg.baseline == "ifgsm":
        batch = ifgsm(source, x, y, acfg, snapshot_iters=(cfg.seed_iters,))
        seed = batch.extras["snapshots"][cfg.seed_iters]
    elif cfg.baseline == "mifgsm":
        batch = mifgsm(source, x, y, acfg)
        seed = mifgsm(source, x, y, dataclasses.replace(acfg, n_iters=cfg.seed_iters)).adversarials
    else:
        raise ConfigError(f"unknown baseline {cfg.baseline!r}")
    if cfg.reference == "multifool":
        if not ensemble:
            raise ConfigError("reference 'multifool' needs ensemble members")
        seed = ensemble_multifool(EnsembleConfig(tuple(ensemble)), x, y,
                                  dataclasses.replace(acfg, n_iters=cfg.seed_iters)).adversarials
    elif cfg.reference != "same":
        raise ConfigError(f"unknown reference {cfg.reference!r}")
    return batch, seed


def run_pipeline(source, targets, x, y, cfg=PipelineConfig(), source_name="source", ensemble=None,
                 baseline=None, run_id=""):
    """Baseline, seeded ILA (auto or fixed layer) and a transfer report.

    With ``all_layers`` the ILA attack is repeated at every endpoint and
    each is added to the report under attack ``"ila@all"``.
    """
    if baseline is None:
        baseline, seed = baseline_with_seed(source, x, y, cfg, ensemble)
    else:
        baseline, seed = baseline
    x = baseline.originals
    base_ila = cfg.ila_config()
    trace = {}
    if cfg.layer == "auto":
        layer, trace = auto_select_layer(source, x, seed, y, base_ila, keep_batches=True)
        ila_batch = trace[layer]["batch"]
    else:
        layer = source.endpoint_index(cfg.layer)
        ila_batch = ila_attack(source, x, seed, y, dataclasses.replace(base_ila, layer=layer))
    per_layer = {}
    if cfg.all_layers:
        for l in range(len(source.endpoints)):
            if l in trace:
                per_layer[l] = trace[l]["batch"]
            elif l == layer:
                per_layer[l] = ila_batch
            else:
                per_layer[l] = ila_attack(source, x, seed, y, dataclasses.replace(base_ila, layer=l))
    all_targets = {source_name: source, **targets}
    ila_name = f"{cfg.loss_kind}"
    report = transfer_matrix({cfg.baseline: baseline, ila_name: ila_batch}, all_targets, source_name,
                             layers={ila_name: layer}, selected_layer=layer, run_id=run_id)
    for l, b in per_layer.items():
        part = transfer_matrix({f"{ila_name}@all": b}, all_targets, source_name, layers={f"{ila_name}@all": l})
        report.rows += [r for r in part.rows if r.attack != "clean"]
    seed_batch = dataclasses.replace(baseline, adversarials=seed, extras={})
    return PipelineResult(baseline, seed_batch, ila_batch, layer, trace, report, per_layer)


# ---------------------------------------------------------------------------
# sweeps

SWEEP_KINDS = ("epsilon", "lr", "alpha", "reference")
SWEEP_COLUMNS = ("kind", "value", "source", "attack", "target", "layer", "accuracy", "n", "status")


def _apply(cfg, kind, value):
    if kind == "epsilon":
        return dataclasses.replace(cfg, budget=dataclasses.replace(cfg.budget, epsilon=float(value)))
    if kind == "lr":
        return dataclasses.replace(cfg, ila_lr=float(value))
    if kind == "alpha":
        return dataclasses.replace(cfg, loss_kind="ilaf", alpha=float(value))
    if kind == "reference":
        return dataclasses.replace(cfg, reference=str(value))
    raise ConfigError(f"unknown sweep kind {kind!r}; expected one of {SWEEP_KINDS}")


def sweep(kind, grid, base, source, targets, x, y, source_name="source", ensemble=None, run_id=""):
    """Run the full pipeline for every grid value; a failing value yields a ``failed`` row."""
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"unknown sweep kind {kind!r}; expected one of {SWEEP_KINDS}")
    if not grid:
        raise ConfigError("sweep grid must be nonempty")
    table = TableReport("sweep", SWEEP_COLUMNS, run_id=run_id)
    results = {}
    for value in grid:
        try:
            cfg = _apply(base, kind, value)
            res = run_pipeline(source, targets, x, y, cfg, source_name, ensemble, run_id=run_id)
        except (IlaBenchError, ValueError, FloatingPointError) as exc:
            table.rows.append({"kind": kind, "value": value, "source": source_name, "attack": "",
                               "target": "", "layer": None, "accuracy": None, "n": 0,
                               "status": f"failed: {exc}"})
            continue
        results[value] = res
        for r in res.report.rows:
            table.rows.append({"kind": kind, "value": value, "source": r.source, "attack": r.attack,
                               "target": r.target, "layer": r.layer, "accuracy": r.accuracy, "n": r.n,
                               "status": "ok"})
    return table, results


# ---------------------------------------------------------------------------
# summary checks used by the acceptance run


def mean_target_accuracy(report, attack, targets, layer=None):
    return float(np.mean([report.accuracy(attack, t, layer) for t in targets]))


def linearity_check(report_var1, report_var2, attack="ilap@all", targets=None):
    """Final-endpoint degradation relative to the best layer, var1 vs var2.

    The final endpoints are the three appended fc layers (the three
    endpoints before the logits); degradation is their mean transfer
    accuracy minus the best single-layer transfer accuracy.

    Returns ``(passed, degradation_var1, degradation_var2)``: passed when
    var1 (linear extra layers) degrades strictly more than var2.
    """

    def degradation(report):
        tg = targets or [t for t in report.targets() if t != report.source]
        layers = sorted({r.layer for r in report.rows if r.attack == attack})
        accs = {l: mean_target_accuracy(report, attack, tg, l) for l in layers}
        return float(np.mean([accs[l] for l in layers[-4:-1]])) - min(accs.values())

    d1, d2 = degradation(report_var1), degradation(report_var2)
    return d1 > d2, d1, d2
