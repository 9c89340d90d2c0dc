"""Run manifests: everything needed to repeat a command."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
from dataclasses import asdict, dataclass, field

from .. import __version__


def run_id(config):
    """Stable 16-hex-digit id derived from a JSON-able config."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ExperimentManifest:
    command: str
    args: dict
    seeds: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    configs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    tool_version: str = __version__
    created: str = ""
    run_id: str = ""

    def __post_init__(self):
        if not self.run_id:
            self.run_id = run_id({"command": self.command, "args": self.args})
        if not self.created:
            self.created = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")

    def to_dict(self):
        return asdict(self)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
        return path

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))
