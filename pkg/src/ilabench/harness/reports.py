"""Report types and their CSV/JSON writers."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

TRANSFER_COLUMNS = ("source", "attack", "target", "layer", "accuracy", "n")


def fmt(v):
    """Numbers at 4 decimal places; NaN and None become empty/nan strings."""
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "nan" if not np.isfinite(v) else f"{float(v):.4f}"
    return str(v)


def _round(v):
    if isinstance(v, (float, np.floating)):
        return None if not np.isfinite(v) else round(float(v), 4)
    if isinstance(v, np.integer):
        return int(v)
    return v


@dataclass
class TransferRow:
    source: str
    attack: str
    target: str
    layer: int | None
    accuracy: float
    n: int


@dataclass
class TransferReport:
    """Long-format accuracies: one row per (attack, target, layer).

    Clean accuracy appears as ``attack="clean"``.
    """

    source: str
    rows: list = field(default_factory=list)
    selected_layer: int | None = None
    run_id: str = ""

    def accuracy(self, attack, target, layer=None):
        for r in self.rows:
            if r.attack == attack and r.target == target and r.layer == layer:
                return r.accuracy
        raise KeyError((attack, target, layer))

    def targets(self):
        return list(dict.fromkeys(r.target for r in self.rows))

    def columns(self):
        return TRANSFER_COLUMNS

    def records(self):
        return [asdict(r) for r in self.rows]

    def to_dict(self):
        return {"kind": "transfer", "source": self.source, "selected_layer": self.selected_layer,
                "run_id": self.run_id, "columns": list(TRANSFER_COLUMNS),
                "rows": [{k: _round(v) for k, v in r.items()} for r in self.records()]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["source"], [TransferRow(**r) for r in d["rows"]], d.get("selected_layer"), d.get("run_id", ""))


@dataclass
class AngleProfile:
    """Mean angle in degrees between two feature deltas at every endpoint."""

    endpoints: list
    angles: list
    n_valid: list
    n_skipped: list
    run_id: str = ""

    def columns(self):
        return ("eval_layer", "endpoint", "mean_angle_deg", "n_valid_images", "n_skipped")

    def records(self):
        return [
            {"eval_layer": i, "endpoint": e, "mean_angle_deg": a, "n_valid_images": v, "n_skipped": s}
            for i, (e, a, v, s) in enumerate(zip(self.endpoints, self.angles, self.n_valid, self.n_skipped))
        ]

    def to_dict(self):
        return {"kind": "angle", "run_id": self.run_id, "columns": list(self.columns()),
                "rows": [{k: _round(v) for k, v in r.items()} for r in self.records()]}


@dataclass
class TableReport:
    """Generic row table with a fixed column order."""

    kind: str
    columns_: tuple
    rows: list = field(default_factory=list)
    run_id: str = ""

    def columns(self):
        return tuple(self.columns_)

    def records(self):
        return self.rows

    def to_dict(self):
        return {"kind": self.kind, "run_id": self.run_id, "columns": list(self.columns_),
                "rows": [{k: _round(r.get(k)) for k in self.columns_} for r in self.rows]}


def report_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = report.columns()
    w.writerow(cols)
    for rec in report.records():
        w.writerow([fmt(rec.get(c)) for c in cols])
    return buf.getvalue()


def report_json(report):
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def write_report(report, path, format="csv"):
    """Write ``report`` as CSV or JSON; I/O errors propagate unchanged."""
    if format == "csv":
        text = report_csv(report)
    elif format == "json":
        text = report_json(report)
    else:
        raise ValueError(f"unknown report format {format!r}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def read_json_report(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
