"""Differentiable primitives.

Each function computes its forward value with numpy and registers a
vector-Jacobian product on the active tape.  Shapes are checked
explicitly; the only implicit broadcast is a bias vector added along the
channel/feature axis, and multiplication by a Python scalar.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DimensionError, InputError
from .tensor import Tensor, as_tensor, make_result


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _constant(value, like):
    return Tensor(np.asarray(value, dtype=like.dtype))


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b):
    a = as_tensor(a)
    if np.isscalar(b):
        return make_result("add_scalar", a.data + a.dtype.type(b), (a,), lambda g: (g,))
    b = as_tensor(b)
    _same_shape("add", a, b)
    return make_result("add", a.data + b.data, (a, b), lambda g: (g, g))


def residual_add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("residual_add", a, b)
    return make_result("residual_add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a = as_tensor(a)
    if np.isscalar(b):
        return make_result("sub_scalar", a.data - a.dtype.type(b), (a,), lambda g: (g,))
    b = as_tensor(b)
    _same_shape("sub", a, b)
    return make_result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a):
    a = as_tensor(a)
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a = as_tensor(a)
    if np.isscalar(b):
        c = a.dtype.type(b)
        return make_result("mul_scalar", a.data * c, (a,), lambda g: (g * c,))
    b = as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b):
    a = as_tensor(a)
    if np.isscalar(b):
        c = a.dtype.type(b)
        return make_result("div_scalar", a.data / c, (a,), lambda g: (g / c,))
    b = as_tensor(b)
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis), dtype=a.dtype)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result("sum", out, (a,), vjp)


def mean(a):
    a = as_tensor(a)
    return mul(sum(a), 1.0 / a.size)


def dot(a, b):
    """Full contraction of two equally shaped tensors to a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("dot", a, b)
    ad, bd = a.data, b.data
    out = np.asarray(np.vdot(ad.ravel(), bd.ravel()), dtype=a.dtype)
    return make_result("dot", out, (a, b), lambda g: (g * bd, g * ad))


def row_norm(a, floor=0.0):
    """L2 norm of each row of an (N, D) tensor.

    The gradient at an exactly-zero row is taken as zero (the subgradient
    of minimum norm) instead of NaN.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"row_norm: expected (N, D), got {a.shape}")
    ad = a.data
    n = np.sqrt(np.einsum("nd,nd->n", ad, ad))

    def vjp(g):
        safe = np.where(n > floor, n, 1).astype(ad.dtype)
        scale = np.where(n > floor, g / safe, 0).astype(ad.dtype)
        return (ad * scale[:, None],)

    return make_result("row_norm", n.astype(ad.dtype), (a,), vjp)


def row_dot(a, b):
    """Per-row dot product of two (N, D) tensors -> (N,)."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("row_dot", a, b)
    ad, bd = a.data, b.data
    out = np.einsum("nd,nd->n", ad, bd)
    return make_result(
        "row_dot", out, (a, b), lambda g: (g[:, None] * bd, g[:, None] * ad)
    )


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {shape}") from exc
    return make_result("reshape", out, (a,), lambda g: (g.reshape(src),))


def flatten(a):
    """(N, ...) -> (N, prod(...))."""
    a = as_tensor(a)
    if a.ndim < 1:
        raise DimensionError("flatten: needs a leading batch axis")
    return reshape(a, (a.shape[0], -1))


# ---------------------------------------------------------------------------
# layers


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return make_result("relu", out, (a,), lambda g: (g * (out > 0),))


def dense(x, weight, bias=None):
    """``x @ weight.T + bias`` for x (N, in), weight (out, in), bias (out,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"dense: expected 2-D input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"dense: input features (axis 1 = {x.shape[1]}) do not match "
            f"weight columns (axis 1 = {weight.shape[1]})"
        )
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (wd.shape[0],):
            raise DimensionError(f"dense: bias shape {bias.shape} != ({wd.shape[0]},)")
        out = out + bias.data
        inputs.append(bias)

    def vjp(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_result("dense", out, inputs, vjp)


def maxpool2x2(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2x2: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise DimensionError(f"maxpool2x2: spatial axes (2, 3) too small: {h}x{w}")
    xd = x.data[:, :, : 2 * ho, : 2 * wo]
    win = xd.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, :, : 2 * ho, : 2 * wo] = (
            gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        )
        return (gx,)

    return make_result("maxpool2x2", out, (x,), vjp)


def avgpool_global(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"avgpool_global: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy(),)

    return make_result("avgpool_global", out.astype(x.dtype), (x,), vjp)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation (no kernel flip), NCHW input, OIHW weight."""
    x, weight = as_tensor(x), as_tensor(weight)
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected NCHW input and OIHW weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise DimensionError(f"conv2d: input channels (axis 1 = {c}) != weight in-channels (axis 1 = {ci})")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: non-positive output size {ho}x{wo} on axes (2, 3)")
    xd, wd = x.data, weight.data
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    # column matrix laid out (C, kh, kw, N, Ho, Wo) so every copy is a block copy
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = wd.reshape(o, c * kh * kw)
    out = (wmat @ cols2).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
        out += bias.data[None, :, None, None]
        inputs.append(bias)

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        gw = (g2 @ cols2.T).reshape(wd.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((n, c) + xp.shape[2:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        dcols[:, i, j].transpose(1, 0, 2, 3)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result("conv2d", out, inputs, vjp)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training=False,
                momentum=0.1, eps=1e-5):
    """Per-channel batch normalisation over (N, H, W).

    ``running_mean``/``running_var`` are plain arrays; they are updated in
    place in training mode only (unbiased batch variance, as is customary).
    """
    if eps <= 0:
        raise ConfigError(f"batchnorm2d: eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d: expected NCHW, got {x.shape}")
    c = x.shape[1]
    for name, t in (("gamma", gamma.data), ("beta", beta.data),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if np.shape(t) != (c,):
            raise DimensionError(f"batchnorm2d: {name} has shape {np.shape(t)}, expected ({c},)")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu = np.asarray(running_mean, dtype=xd.dtype)
        var = np.asarray(running_var, dtype=xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def vjp(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gd
        if training:
            mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
            mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = (gxhat - mean_g - xhat * mean_gx) * inv[None, :, None, None]
        else:
            gx = gxhat * inv[None, :, None, None]
        return (gx, ggamma, gbeta)

    return make_result("batchnorm2d", out.astype(xd.dtype), (x, gamma, beta), vjp)


def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Cross-entropy of softmax(logits) against integer labels.

    ``reduction`` is "mean" (default), "sum" or "none" (per-row losses).
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: expected (N, K) logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: labels shape {labels.shape} != ({n},)")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError("softmax_cross_entropy: labels must be integers")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    per = lse - z[rows, labels]
    if reduction == "mean":
        out = np.asarray(per.mean(), dtype=logits.dtype)
        scale = 1.0 / n
    elif reduction == "sum":
        out = np.asarray(per.sum(), dtype=logits.dtype)
        scale = 1.0
    elif reduction == "none":
        out = per.astype(logits.dtype)
        scale = None
    else:
        raise ConfigError(f"unknown reduction {reduction!r}")

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1
        if scale is None:
            return ((p * g[:, None]).astype(logits.dtype),)
        return ((p * (g * scale)).astype(logits.dtype),)

    return make_result("softmax_cross_entropy", out, (logits,), vjp)


PRIMITIVES = {
    "dense": dense,
    "relu": relu,
    "maxpool2x2": maxpool2x2,
    "avgpool_global": avgpool_global,
    "residual_add": residual_add,
    "flatten": flatten,
}


def primitive_forward(kind, *inputs):
    """Dispatch by primitive name (``dense``, ``relu``, ``maxpool2x2``, ...)."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ConfigError(f"unknown primitive {kind!r}; expected one of {sorted(PRIMITIVES)}") from None
    return fn(*inputs)
