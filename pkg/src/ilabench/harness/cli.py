"""Command-line entry point: ``ilabench <command> [options]``.

Global flags come before the command.  ``--config`` takes a JSON file whose
keys mirror the command's option names (or a manifest written by an
earlier run, whose ``args`` are replayed); explicit flags override it.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys

import numpy as np

from .. import engine as E
from ..attacks import (
    AttackConfig,
    EnsembleConfig,
    PerturbationBudget,
    ensemble_multifool,
    fgsm,
    ifgsm,
    mifgsm,
)
from ..data import load_cifar10_binary, synthetic_dataset
from ..errors import ConfigError, IlaBenchError, InputError
from ..ila import IlaConfig, auto_select_layer, curves_to_csv, disturbance_curve, ila_attack
from ..models import ModelSpec, build_model, load_model, to_dtype
from .batchio import file_sha256, load_batch, originals_hash, save_batch
from .experiments import (
    PipelineConfig,
    angle_by_layer,
    boundary_grid,
    sweep,
    transfer_matrix,
)
from .manifest import ExperimentManifest
from .reports import write_report
from .training import TrainConfig, default_lr, train_model

log = logging.getLogger("ilabench")


# ---------------------------------------------------------------------------
# helpers


def dataset_from_args(args, split=None):
    """Build a dataset from ``--data`` (``synthetic`` or ``cifar10:<dir>``)."""
    split = split or args.split
    kind = args.data
    if kind == "synthetic":
        n = args.limit or 1000
        seed = args.data_seed + (0 if split == "train" else 1_000_003)
        ds = synthetic_dataset(args.start + n, seed=seed, separation=args.separation, split=split)
    elif kind.startswith("cifar10"):
        path = kind.partition(":")[2] or os.environ.get("ILA_CIFAR10_DIR", "")
        if not path:
            raise InputError("cifar10 data needs a directory: --data cifar10:<dir> or ILA_CIFAR10_DIR")
        limit = None if args.limit is None else args.start + args.limit
        ds = load_cifar10_binary(path, split, limit)
    else:
        raise ConfigError(f"unknown --data {kind!r}; use 'synthetic' or 'cifar10:<dir>'")
    return ds.subset(args.start, None if args.limit is None else args.start + args.limit)


def dataset_spec(args, split=None):
    return {"data": args.data, "split": split or args.split, "start": args.start, "limit": args.limit,
            "separation": args.separation, "data_seed": args.data_seed}


def open_model(path, f64=False):
    model = load_model(path)
    if f64:
        model.frozen = False
        for _, arr in model.named_state():
            arr.flags.writeable = True
        to_dtype(model, np.float64).freeze()
    return model


def _budget(args):
    return PerturbationBudget(args.eps)


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _manifest(args, command, **kw):
    keep = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "out", "threads")}
    m = ExperimentManifest(command, keep, seeds={"seed": args.seed}, **kw)
    m.write(_out(args, "manifest.json"))
    return m


def _summary(**row):
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    spec = ModelSpec(args.arch, width_multiplier=args.width)
    model = build_model(spec, seed=args.seed)
    train = dataset_from_args(args, "train")
    test_args = argparse.Namespace(**{**vars(args), "limit": args.test_limit, "start": 0})
    test = dataset_from_args(test_args, "test")
    cfg = TrainConfig(args.epochs, args.lr or default_lr(args.arch), args.schedule, args.batch_size, 0.9, 5e-4,
                      not args.no_flip, not args.no_crop, args.seed)
    path = args.model_out or _out(args, f"{args.arch}.ilam")
    log_path = _out(args, "train_log.csv")
    rows = []

    def on_epoch(entry):
        rows.append(entry)
        log.info("epoch %d lr %.4f loss %.4f train %.2f test %.2f", entry["epoch"], entry["lr"],
                 entry["loss"], entry["train_acc"], entry["test_acc"])
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("epoch,lr,loss,train_acc,test_acc\n")
            for r in rows:
                fh.write(f"{r['epoch']},{r['lr']:.6f},{r['loss']:.4f},{r['train_acc']:.4f},{r['test_acc']:.4f}\n")

    result = train_model(model, train, test, cfg, checkpoint=path, log_fn=on_epoch)
    _manifest(args, "train", models={"output": path, "sha256": file_sha256(path)},
              dataset=dataset_spec(args, "train"), configs={"train": cfg.to_dict()},
              outputs={"model": path, "log": log_path})
    _summary(arch=args.arch, test_acc=result.log[-1]["test_acc"], params=model.num_parameters())
    return 0


def cmd_attack(args):
    model = open_model(args.model, args.f64)
    ds = dataset_from_args(args)
    cfg = AttackConfig(_budget(args), args.lr, args.iters, args.mu, args.seed)
    x = ds.images.astype(model.parameters()[0].data.dtype)
    if args.attack == "fgsm":
        batch = fgsm(model, x, ds.labels, cfg.budget)
    elif args.attack == "ifgsm":
        batch = ifgsm(model, x, ds.labels, cfg, snapshot_iters=tuple(args.snapshot or ()))
    elif args.attack == "mifgsm":
        batch = mifgsm(model, x, ds.labels, cfg)
    else:
        members = [model] + [open_model(p, args.f64) for p in args.members or ()]
        batch = ensemble_multifool(EnsembleConfig(tuple(members)), x, ds.labels, cfg)
    meta = {"source_sha256": file_sha256(args.model), "dataset": dataset_spec(args)}
    path = _out(args, "batch.ilab")
    digest = save_batch(batch, path, meta)
    _write_text(_out(args, "batch.csv"), batch.to_csv())
    _manifest(args, "attack", models={"source": args.model, "source_sha256": meta["source_sha256"]},
              dataset=dataset_spec(args), configs={"attack": args.attack, **cfg.to_dict()},
              outputs={"batch": path, "batch_sha256": digest})
    _summary(attack=args.attack, n=len(batch), source_acc=100.0 * float(np.mean(~batch.fooled)),
             max_linf=float(batch.linf().max(initial=0.0)))
    return 0


def _ila_config(args, layer):
    return IlaConfig(layer, args.loss, args.alpha, _budget(args), args.lr, args.iters)


def cmd_ila(args):
    model = open_model(args.model, args.f64)
    ref, header = load_batch(args.reference)
    src_hash = header.get("meta", {}).get("source_sha256")
    if src_hash and src_hash != file_sha256(args.model):
        raise InputError("reference batch was produced on a different source model")
    if args.data:
        ds = dataset_from_args(args)
        if originals_hash(ds.images) != header["originals_sha256"]:
            raise InputError("originals hash mismatch between dataset slice and reference batch")
    dtype = model.parameters()[0].data.dtype
    x = ref.originals.astype(dtype)
    snaps = ref.extras.get("snapshots") or {}
    if args.seed_iter is not None and args.seed_iter not in snaps:
        raise InputError(f"reference batch has no snapshot at iteration {args.seed_iter}")
    x_ref = (snaps[args.seed_iter] if args.seed_iter is not None else ref.adversarials).astype(dtype)
    trace_rows = []
    if args.layer == "auto":
        layer, trace = auto_select_layer(model, x, x_ref, ref.labels, _ila_config(args, 0), keep_batches=True)
        batch = trace[layer]["batch"]
        curves = [t["curve"] for t in trace.values()]
        for l, t in trace.items():
            trace_rows.append({"candidate": l, "endpoint": model.endpoints[l].name,
                               "curve": [None if not np.isfinite(v) else round(v, 4) for v in t["curve"].values],
                               "selected": l == layer})
    else:
        layer = model.endpoint_index(int(args.layer) if args.layer.lstrip("-").isdigit() else args.layer)
        batch = ila_attack(model, x, x_ref, ref.labels, _ila_config(args, layer))
        curves = [disturbance_curve(model, x, batch.adversarials, x_ref, layer, model.spec.arch_id, args.loss)]
    path = _out(args, "batch.ilab")
    digest = save_batch(batch, path, {"source_sha256": file_sha256(args.model),
                                       "reference_sha256": file_sha256(args.reference)})
    _write_text(_out(args, "batch.csv"), batch.to_csv())
    _write_text(_out(args, "curves.csv"), curves_to_csv(curves))
    with open(_out(args, "selection.json"), "w", encoding="utf-8") as fh:
        json.dump({"selected_layer": layer, "candidates": trace_rows}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _manifest(args, "ila", models={"source": args.model}, configs={"ila": _ila_config(args, layer).to_dict()},
              outputs={"batch": path, "batch_sha256": digest})
    _summary(layer=layer, n=len(batch), source_acc=100.0 * float(np.mean(~batch.fooled)),
             degenerate=int(np.sum(batch.extras["degenerate"])))
    return 0


def _named_models(paths, f64):
    out = {}
    for p in paths:
        name = os.path.splitext(os.path.basename(p))[0]
        out[name] = open_model(p, f64)
    return out


def cmd_transfer(args):
    batches = {}
    for p in args.batches:
        b, _ = load_batch(p)
        name = os.path.splitext(os.path.basename(os.path.dirname(os.path.abspath(p))))[0] or b.attack
        batches[name if name not in batches else p] = b
    targets = _named_models(args.targets, args.f64)
    report = transfer_matrix(batches, targets, args.source)
    run = _manifest(args, "transfer", models={"targets": list(args.targets)},
                    outputs={"csv": _out(args, "transfer.csv"), "json": _out(args, "transfer.json")})
    report.run_id = run.run_id
    write_report(report, _out(args, "transfer.csv"), "csv")
    write_report(report, _out(args, "transfer.json"), "json")
    for r in report.rows:
        _summary(attack=r.attack, target=r.target, accuracy=r.accuracy)
    return 0


def cmd_angle(args):
    model = open_model(args.model, args.f64)
    a, _ = load_batch(args.batch_a)
    b, _ = load_batch(args.batch_b)
    if originals_hash(a.originals) != originals_hash(b.originals):
        raise InputError("batches do not share originals")
    profile = angle_by_layer(model, a.originals, a, b)
    run = _manifest(args, "angle", models={"source": args.model})
    profile.run_id = run.run_id
    write_report(profile, _out(args, "angles.csv"), "csv")
    for name, ang in zip(profile.endpoints, profile.angles):
        _summary(endpoint=name, angle=ang)
    return 0


def cmd_boundary(args):
    model = open_model(args.model, args.f64)
    a, _ = load_batch(args.batch_a)
    b, _ = load_batch(args.batch_b)
    if originals_hash(a.originals) != originals_hash(b.originals):
        raise InputError("batches do not share originals")
    i = args.index
    x = a.originals[i]
    extent = args.extent if args.extent is not None else 2 * max(
        float(np.linalg.norm(a.perturbations[i])), float(np.linalg.norm(b.perturbations[i])))
    grid = boundary_grid(model, x, a.perturbations[i], b.perturbations[i], extent, args.resolution)
    _write_text(_out(args, "boundary.csv"), grid.to_csv())
    _manifest(args, "boundary", models={"source": args.model})
    _summary(rows=args.resolution**2, extent=extent)
    return 0


def _parse_value(kind, v):
    return v if kind == "reference" else float(v)


def cmd_sweep(args):
    source = open_model(args.model, args.f64)
    targets = _named_models(args.targets, args.f64)
    ensemble = [source] + [open_model(p, args.f64) for p in args.members or ()]
    ds = dataset_from_args(args)
    base = PipelineConfig(budget=_budget(args), ila_lr=args.lr, ila_iters=args.iters, loss_kind=args.loss,
                          alpha=args.alpha, layer=args.layer if args.layer == "auto" else int(args.layer))
    grid = [_parse_value(args.kind, v) for v in args.values]
    run = _manifest(args, "sweep", models={"source": args.model, "targets": list(args.targets)},
                    dataset=dataset_spec(args), configs={"base": base.to_dict()})
    x = ds.images.astype(source.parameters()[0].data.dtype)
    table, _ = sweep(args.kind, grid, base, source, targets, x, ds.labels,
                     os.path.splitext(os.path.basename(args.model))[0], ensemble, run.run_id)
    write_report(table, _out(args, "sweep.csv"), "csv")
    write_report(table, _out(args, "sweep.json"), "json")
    failed = sum(1 for r in table.rows if r["status"] != "ok")
    _summary(kind=args.kind, values=len(grid), rows=len(table.rows), failed=failed)
    return 0


# ---------------------------------------------------------------------------
# parser


def _data_args(p, split="test", limit=None):
    p.add_argument("--data", default="synthetic", help="'synthetic' or 'cifar10:<dir>'")
    p.add_argument("--split", default=split, choices=("train", "test"))
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--limit", type=int, default=limit)
    p.add_argument("--separation", type=float, default=1.0, help="synthetic class separation")
    p.add_argument("--data-seed", type=int, default=0)


def _ila_args(p):
    p.add_argument("--layer", default="auto", help="endpoint index or name, or 'auto'")
    p.add_argument("--loss", default="ilap", choices=("ilap", "ilaf"))
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=0.006)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--eps", type=float, default=0.015)


def build_parser():
    parser = argparse.ArgumentParser(prog="ilabench", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", help="JSON config or manifest to replay")
    parser.add_argument("--out", default="runs", help="output directory")
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    parser.add_argument("--f64", action="store_true", help="64-bit verification mode")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and save it frozen")
    p.add_argument("--arch", default="mini_resnet")
    p.add_argument("--width", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=None, help="default depends on --arch")
    p.add_argument("--schedule", default="cosine", choices=("constant", "step", "cosine"))
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--no-flip", action="store_true")
    p.add_argument("--no-crop", action="store_true")
    p.add_argument("--test-limit", type=int, default=1000)
    p.add_argument("--model-out")
    _data_args(p, split="train", limit=10000)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="run a baseline attack")
    p.add_argument("--model", required=True)
    p.add_argument("--attack", default="ifgsm", choices=("fgsm", "ifgsm", "mifgsm", "multifool"))
    p.add_argument("--members", nargs="*", help="extra ensemble members for multifool")
    p.add_argument("--eps", type=float, default=0.015)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--snapshot", type=int, nargs="*", help="iterations to snapshot (ifgsm)")
    _data_args(p, limit=1000)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("ila", help="fine-tune a reference batch with ILA")
    p.add_argument("--model", required=True)
    p.add_argument("--reference", required=True, help="baseline batch file")
    p.add_argument("--seed-iter", type=int, default=None,
                   help="use the reference batch's snapshot at this iteration as x'")
    _ila_args(p)
    _data_args(p)
    p.set_defaults(data=None, func=cmd_ila)

    p = sub.add_parser("transfer", help="evaluate batches on target models")
    p.add_argument("--batches", nargs="+", required=True)
    p.add_argument("--targets", nargs="+", required=True)
    p.add_argument("--source", default="source")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("angle", help="per-endpoint angle between two batches' feature deltas")
    p.add_argument("--model", required=True)
    p.add_argument("--batch-a", required=True)
    p.add_argument("--batch-b", required=True)
    p.set_defaults(func=cmd_angle)

    p = sub.add_parser("boundary", help="decision regions on the plane of two perturbations")
    p.add_argument("--model", required=True)
    p.add_argument("--batch-a", required=True)
    p.add_argument("--batch-b", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--extent", type=float, default=None)
    p.add_argument("--resolution", type=int, default=101)
    p.set_defaults(func=cmd_boundary)

    p = sub.add_parser("sweep", help="baseline + ILA + transfer over a parameter grid")
    p.add_argument("--kind", required=True, choices=("epsilon", "lr", "alpha", "reference"))
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--targets", nargs="+", required=True)
    p.add_argument("--members", nargs="*", help="multifool ensemble members besides the source")
    _ila_args(p)
    _data_args(p, limit=1000)
    p.set_defaults(func=cmd_sweep)
    parser.subcommands = sub.choices
    return parser


def _load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg.get("args", cfg)


def parse_args(argv):
    parser = build_parser()
    required = {name: [a for a in sub._actions if a.required] for name, sub in parser.subcommands.items()}
    if "--config" not in argv and not any(a.startswith("--config=") for a in argv):
        return parser.parse_args(argv)
    # first pass only locates --config and the command; required options may come from the config
    for actions in required.values():
        for a in actions:
            a.required = False
    args = parser.parse_args(argv)
    if args.config:
        # re-parse with config values as defaults so explicit flags still win
        cfg = {k.replace("-", "_"): v for k, v in _load_config(args.config).items()}
        sub = parser.subcommands[args.command]
        for a in required[args.command]:
            a.required = a.dest not in cfg
        sub_keys = {a.dest for a in sub._actions}
        top_keys = {a.dest for a in parser._actions} - {"config", "out"}
        unknown = set(cfg) - sub_keys - top_keys - {"command", "config", "out"}
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        sub.set_defaults(**{k: v for k, v in cfg.items() if k in sub_keys})
        parser.set_defaults(**{k: v for k, v in cfg.items() if k in top_keys})
        args = parser.parse_args(argv)
    return args


@contextlib.contextmanager
def _thread_limit(n):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except IlaBenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit(args.threads):
            if args.f64:
                with E.precision(np.float64):
                    return args.func(args)
            return args.func(args)
    except IlaBenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
