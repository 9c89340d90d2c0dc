"""Deterministic on-disk format for adversarial batches.

Layout::

    b"ILAB" | u32 header length | UTF-8 JSON header (sorted keys)
    | raw little-endian arrays in header order

The header holds the attack id, its config, JSON-able extras and an
``arrays`` table of ``{name, dtype, shape}``.  Nothing time-dependent is
written, so the same batch always produces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from ..attacks import AdversarialBatch
from ..errors import FormatError

MAGIC = b"ILAB"
_CORE = ("originals", "adversarials", "labels", "fooled", "source_pred_clean", "source_pred_adv")


def originals_hash(x):
    """SHA-256 of the float32 little-endian bytes of an image batch."""
    arr = np.ascontiguousarray(np.asarray(x, dtype="<f4"))
    return hashlib.sha256(arr.tobytes()).hexdigest()


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _array_entries(batch):
    out = []
    for name in _CORE:
        arr = getattr(batch, name)
        if arr is None:
            continue
        arr = np.asarray(arr)
        if name in ("originals", "adversarials"):
            arr = arr.astype("<f4")
        elif arr.dtype == bool:
            arr = arr.astype(np.uint8)
        else:
            arr = arr.astype("<i8")
        out.append((name, arr))
    for key in sorted(batch.extras):
        val = batch.extras[key]
        if isinstance(val, np.ndarray):
            out.append((f"extras.{key}", val.astype(val.dtype.newbyteorder("<"))))
        elif isinstance(val, dict) and val and all(isinstance(v, np.ndarray) for v in val.values()):
            for sub in sorted(val):
                out.append((f"extras.{key}.{sub}", val[sub].astype("<f4")))
    return out


def encode_batch(batch, meta=None):
    arrays = _array_entries(batch)
    scalars = {k: _jsonable(v) for k, v in batch.extras.items()
               if not isinstance(v, (np.ndarray, dict)) or (isinstance(v, dict) and not v)}
    header = {
        "attack": batch.attack,
        "config": _jsonable(batch.config),
        "extras": scalars,
        "meta": _jsonable(meta or {}),
        "arrays": [{"name": n, "dtype": a.dtype.str, "shape": list(a.shape)} for n, a in arrays],
        "originals_sha256": originals_hash(batch.originals),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(hbytes)), hbytes]
    parts += [np.ascontiguousarray(a).tobytes() for _, a in arrays]
    return b"".join(parts)


def decode_batch(buf):
    """Inverse of :func:`encode_batch`; returns ``(batch, header)``."""
    buf = memoryview(buf).tobytes()
    if buf[:4] != MAGIC:
        raise FormatError("bad magic, not an ILAB batch file", 0)
    if len(buf) < 8:
        raise FormatError("truncated header length", 4)
    (hlen,) = struct.unpack("<I", buf[4:8])
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable batch header: {exc}", 8) from None
    pos = 8 + hlen
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dt.itemsize
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated array {entry['name']}", pos)
        arrays[entry["name"]] = np.frombuffer(buf, dt, count, pos).reshape(entry["shape"]).copy()
        pos += nbytes
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    extras = dict(header["extras"])
    for name, arr in arrays.items():
        if not name.startswith("extras."):
            continue
        parts = name.split(".")
        if len(parts) == 2:
            extras[parts[1]] = arr.astype(bool) if parts[1] == "degenerate" else arr
        else:
            extras.setdefault(parts[1], {})[int(parts[2]) if parts[2].isdigit() else parts[2]] = arr
    batch = AdversarialBatch(
        originals=arrays["originals"].astype(np.float32),
        adversarials=arrays["adversarials"].astype(np.float32),
        labels=arrays["labels"].astype(np.int64),
        attack=header["attack"],
        config=header["config"],
        fooled=arrays["fooled"].astype(bool),
        source_pred_clean=arrays.get("source_pred_clean"),
        source_pred_adv=arrays.get("source_pred_adv"),
        extras=extras,
    )
    if header["originals_sha256"] != originals_hash(batch.originals):
        raise FormatError("originals checksum mismatch", 8)
    return batch, header


def save_batch(batch, path, meta=None):
    data = encode_batch(batch, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load_batch(path):
    with open(path, "rb") as fh:
        return decode_batch(fh.read())


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
