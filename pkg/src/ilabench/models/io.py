"""Bit-exact model file format.

Layout (all integers little-endian)::

    b"ILAM" | u32 version=1 | u16 len + utf-8 arch_id | u32 num_classes
    | f32 width_multiplier | u32 record count P
    | P x { u16 len + utf-8 name | u8 rank | rank x u32 dims | f32 values }

Records carry parameters and buffers (running statistics, input
normalisation constants) in :meth:`ModelHandle.named_state` order.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import FormatError, UsageError
from .zoo import ARCH_IDS, ModelSpec, build_model

MAGIC = b"ILAM"
VERSION = 1


def encode_model(model):
    spec = model.spec
    arch = spec.arch_id.encode("utf-8")
    state = model.named_state()
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<H", len(arch)),
        arch,
        struct.pack("<I", spec.num_classes),
        struct.pack("<f", spec.width_multiplier),
        struct.pack("<I", len(state)),
    ]
    for name, arr in state:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def expected_file_size(model):
    """Header size plus the sum of record sizes, derived from the layout."""
    arch = model.spec.arch_id.encode("utf-8")
    header = 4 + 4 + 2 + len(arch) + 4 + 4 + 4
    records = 0
    for name, arr in model.named_state():
        records += 2 + len(name.encode("utf-8")) + 1 + 4 * arr.ndim + 4 * arr.size
    return header + records


def save_model(model, path):
    if not model.frozen:
        raise UsageError("only frozen models can be saved; call freeze() first")
    data = encode_model(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return len(data)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def decode_model(buf):
    r = _Reader(memoryview(buf).tobytes())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not an ILAM model file", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    (alen,) = r.unpack("<H", "arch id length")
    at = r.pos
    try:
        arch = r.take(alen, "arch id").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("arch id is not valid utf-8", at) from None
    if arch not in ARCH_IDS:
        raise FormatError(f"unknown arch id {arch!r}", at)
    (num_classes,) = r.unpack("<I", "num_classes")
    (width,) = r.unpack("<f", "width_multiplier")
    (count,) = r.unpack("<I", "record count")
    arrays = {}
    for _ in range(count):
        at = r.pos
        (nlen,) = r.unpack("<H", "name length")
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("record name is not valid utf-8", at) from None
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * size, f"values of {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes", r.pos)
    spec = ModelSpec(arch, int(num_classes), float(width))
    model = build_model(spec, seed=0)
    try:
        model.load_state(arrays)
    except ValueError as exc:
        raise FormatError(f"records do not match architecture: {exc}", r.pos) from None
    return model.freeze()


def load_model(path):
    with open(path, "rb") as fh:
        return decode_model(fh.read())
