"""Tensor, tape and the reverse-mode backward pass.

Every differentiable primitive appends a :class:`Record` to the active
:class:`Tape` when at least one of its inputs requires a gradient.  The
tape is append-only, so it is topologically ordered by construction and
``backward`` is a single reverse sweep over it.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import UsageError

_state = threading.local()


def _get(name, default):
    if not hasattr(_state, name):
        setattr(_state, name, default() if callable(default) else default)
    return getattr(_state, name)


def get_default_dtype():
    return _get("dtype", np.float32)


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported dtype {dtype}; use float32 or float64")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (``float64`` for verification)."""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled():
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """Dense array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_record", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            dtype = get_default_dtype()
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._record = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self, retain_tape=False):
        backward(self, retain_tape=retain_tape)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; the rules live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis=axis)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


@dataclass(eq=False)
class Record:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence]


@dataclass(eq=False)
class Tape:
    """Ordered log of primitive applications for one forward pass."""

    records: list = field(default_factory=list)

    def append(self, record):
        self.records.append(record)

    def clear(self):
        for rec in self.records:
            rec.output._record = None
        self.records.clear()

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        _get("tapes", list).append(self)
        return self

    def __exit__(self, *exc):
        _get("tapes", list).pop()
        return False


def current_tape():
    stack = _get("tapes", list)
    if stack:
        return stack[-1]
    return _get("default_tape", Tape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(op, data, inputs, vjp):
    """Wrap ``data`` as the output of ``op`` and record it when needed."""
    needs = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        tape = current_tape()
        rec = Record(op, tuple(inputs), out, vjp)
        out._record = (tape, rec)
        tape.append(rec)
    return out


def backward(root, tape=None, retain_tape=False):
    """Accumulate d(root)/d(t) into ``t.grad`` for every leaf ``t`` on the tape.

    Leaves that sit on the tape but do not influence ``root`` receive a zero
    gradient.  The tape is cleared afterwards unless ``retain_tape``.
    """
    if root.size != 1:
        raise UsageError(f"backward() needs a scalar root, got shape {root.shape}")
    seed = np.ones(root.shape, dtype=root.dtype)
    if root._record is None:
        if not root.requires_grad:
            raise UsageError("root does not require grad and is not on a tape")
        root.grad = seed if root.grad is None else root.grad + seed
        return
    root_tape, root_rec = root._record
    if tape is None:
        tape = root_tape
    elif tape is not root_tape:
        raise UsageError("root was recorded on a different tape")

    records = tape.records
    stop = next(i for i in range(len(records) - 1, -1, -1) if records[i] is root_rec)
    grads = {id(root): seed}
    leaves = {}
    for rec in reversed(records[: stop + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            for t in rec.inputs:
                if t.requires_grad and t._record is None:
                    leaves.setdefault(id(t), t)
            continue
        in_grads = rec.vjp(g)
        for t, gi in zip(rec.inputs, in_grads):
            if not t.requires_grad:
                continue
            if t._record is None:
                leaves.setdefault(id(t), t)
            if gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        else:
            g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g
    if not retain_tape:
        for rec in records[: stop + 1]:
            rec.output._record = None
        del records[: stop + 1]


def grad_of(fn, x):
    """Return d fn(x) / dx for an array ``x`` with a fresh tape."""
    with Tape():
        xt = Tensor(np.array(x, copy=True), requires_grad=True)
        out = fn(xt)
        backward(out)
    return xt.grad
