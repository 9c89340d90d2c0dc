"""Desk-scale transfer study: train a small zoo, attack, fine-tune, evaluate.

One call of :func:`run_desk` produces every number the directional
checks need: clean accuracies, the baseline vs ILA transfer report at the
auto-selected layer and at every endpoint, projection growth, the
I-FGSM vs multi-fool angle profile and the reference comparison.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from ..attacks import AttackConfig, EnsembleConfig, ensemble_multifool
from ..models import ModelSpec, build_model, load_model
from .experiments import (
    PipelineConfig,
    angle_by_layer,
    baseline_with_seed,
    mean_target_accuracy,
    rank_correlation,
    run_pipeline,
)
from .training import TrainConfig, accuracy, default_lr, train_model

log = logging.getLogger("ilabench.desk")


@dataclass(frozen=True)
class ZooMember:
    name: str
    arch: str
    seed: int = 0


@dataclass(frozen=True)
class DeskConfig:
    source: ZooMember = ZooMember("resnet_s0", "mini_resnet", 0)
    targets: tuple = (
        ZooMember("cnn_s0", "mini_cnn", 0),
        ZooMember("vgg_s0", "mini_vgg", 0),
        ZooMember("resnet_s1", "mini_resnet", 1),
    )
    width: float = 1.0
    epochs: int = 15
    n_eval: int = 1000
    pipeline: PipelineConfig = PipelineConfig(all_layers=True)


@dataclass
class DeskResult:
    clean: dict
    report: object
    selected_layer: int
    per_layer_mean: dict
    baseline_mean: float
    projection_growth: float
    angle_profile: object
    angle_rank_corr: float
    reference_gain: dict
    timings: dict = field(default_factory=dict)
    train_logs: dict = field(default_factory=dict)


def train_zoo(cfg, train, test, cache_dir=None, members=None):
    """Train (or load from ``cache_dir``) every zoo member; returns name -> model."""
    models, logs = {}, {}
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
    for m in members or (cfg.source, *cfg.targets):
        path = os.path.join(cache_dir, f"{m.name}.ilam") if cache_dir else None
        if path and os.path.exists(path):
            models[m.name] = load_model(path)
            continue
        model = build_model(ModelSpec(m.arch, width_multiplier=cfg.width), seed=m.seed)
        tcfg = TrainConfig(epochs=cfg.epochs, lr=default_lr(m.arch), seed=m.seed)
        res = train_model(model, train, test, tcfg, checkpoint=path,
                          log_fn=lambda e, n=m.name: log.info("%s %s", n, e))
        models[m.name], logs[m.name] = res.model, res.log
    return models, logs


def run_desk(cfg, train, test, cache_dir=None):
    timings = {}
    t0 = time.perf_counter()
    models, logs = train_zoo(cfg, train, test, cache_dir)
    timings["train"] = time.perf_counter() - t0
    source = models[cfg.source.name]
    targets = {m.name: models[m.name] for m in cfg.targets}
    clean = {name: accuracy(m, test) for name, m in models.items()}
    ev = test.subset(0, cfg.n_eval)
    x, y = ev.images, ev.labels

    t0 = time.perf_counter()
    pcfg = cfg.pipeline
    baseline, seed = baseline_with_seed(source, x, y, pcfg)
    timings["baseline"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    res = run_pipeline(source, targets, x, y, pcfg, cfg.source.name, baseline=(baseline, seed))
    timings["ila"] = time.perf_counter() - t0
    report = res.report
    tnames = list(targets)
    ila_all = f"{pcfg.loss_kind}@all"
    per_layer = {l: mean_target_accuracy(report, ila_all, tnames, l) for l in res.per_layer}
    base_mean = mean_target_accuracy(report, pcfg.baseline, tnames)

    ila = res.ila
    valid = ~ila.extras["degenerate"]
    growth = float(np.mean(ila.extras["final_projection"][valid] > ila.extras["seed_projection"][valid]))

    # multi-fool reference: angles against the I-FGSM seed and seeded ILA per layer
    t0 = time.perf_counter()
    ensemble = EnsembleConfig(tuple(models.values()))
    mf_cfg = AttackConfig(pcfg.budget, pcfg.baseline_lr, pcfg.seed_iters)
    multifool = ensemble_multifool(ensemble, x, y, mf_cfg)
    profile = angle_by_layer(source, x, seed, multifool)
    mf_res = run_pipeline(source, targets, x, y, dataclasses.replace(pcfg, layer=0), cfg.source.name,
                          baseline=(baseline, multifool.adversarials))
    mf_per_layer = {l: mean_target_accuracy(mf_res.report, ila_all, tnames, l) for l in mf_res.per_layer}
    timings["reference"] = time.perf_counter() - t0
    # positive gain: multi-fool seeding lowers target accuracy more than I-FGSM seeding
    gain = {l: per_layer[l] - mf_per_layer[l] for l in per_layer}
    return DeskResult(clean, report, res.layer, per_layer, base_mean, growth, profile,
                      rank_correlation(profile.angles), gain, timings, logs)


def third_means(values):
    """Mean of the first and last thirds of an ordered sequence (ceil-sized)."""
    v = list(values)
    k = max(1, -(-len(v) // 3))
    return float(np.mean(v[:k])), float(np.mean(v[-k:]))


__all__ = ["DeskConfig", "DeskResult", "ZooMember", "run_desk", "third_means", "train_zoo"]
