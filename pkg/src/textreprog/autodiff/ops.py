"""Differentiable primitives.

Every op accepts Tensors (or plain arrays for constant operands) and returns
a Tensor. Shapes follow numpy conventions; ``add``/``sub``/``mul`` broadcast.
Reductions over the class axis (softmax, log-softmax, cross-entropy) are
carried out in float64 and cast back to the input precision.
"""

from __future__ import annotations

import numpy as np

from .core import DomainError, ShapeError, Tensor, record


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = _t(a), _t(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), a.data + b.data, bw)


def sub(a, b):
    a, b = _t(a), _t(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return record("sub", (a, b), a.data - b.data, bw)


def mul(a, b):
    a, b = _t(a), _t(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", (a, b), a.data * b.data, bw)


def scale(a, c):
    a = _t(a)
    c = float(c)
    return record("scale", (a,), a.data * a.data.dtype.type(c), lambda g: (g * c,))


def tanh(a):
    a = _t(a)
    out = np.tanh(a.data)
    return record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = _t(a)
    x = a.data
    # split on sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def relu(a):
    a = _t(a)
    pos = a.data > 0
    return record("relu", (a,), np.where(pos, a.data, 0).astype(a.dtype), lambda g: (g * pos,))


def exp(a):
    a = _t(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return record("exp", (a,), out, lambda g: (g * out,))


def log(a):
    a = _t(a)
    if (a.data <= 0).any():
        raise DomainError("log of non-positive value")
    return record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


# -- linear algebra / structure ----------------------------------------------


def matmul(a, b):
    """``a @ b`` where ``b`` is 2-D (shared weight) or has ``a``'s batch shape."""
    a, b = _t(a), _t(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            if a.ndim == 1:
                ga = ga.reshape(a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, b.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return record("matmul", (a, b), out, bw)


def concat(tensors, axis=-1):
    tensors = [_t(x) for x in tensors]
    try:
        out = np.concatenate([x.data for x in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {err}") from None
    sizes = np.cumsum([x.shape[axis] for x in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return record("concat", tuple(tensors), out, bw)


def slice(a, index):
    """Basic (non-fancy) numpy indexing."""
    a = _t(a)
    out = a.data[index]
    if out.base is not None or out.ndim == 0:
        out = np.array(out)

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return record("slice", (a,), out, bw)


def reshape(a, shape):
    a = _t(a)
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def sum(a, axis=None):
    a = _t(a)
    out = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return record("sum", (a,), out, bw)


def mean(a):
    a = _t(a)
    n = a.size
    out = np.asarray(a.data.mean())
    return record("mean", (a,), out, lambda g: (np.full_like(a.data, g / n),))


def embedding(weight, ids):
    """Row gather ``weight[ids]``; negative ids give zero rows."""
    weight = _t(weight)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if ids.size and ids.max() >= weight.shape[0]:
        raise ShapeError(f"embedding id {ids.max()} out of range for {weight.shape[0]} rows")
    valid = ids >= 0
    safe = np.where(valid, ids, 0)
    out = weight.data[safe]
    if not valid.all():
        out = out * valid[..., None].astype(out.dtype)

    def bw(g):
        gw = np.zeros_like(weight.data)
        flat = g.reshape(-1, weight.shape[-1])
        keep = valid.reshape(-1)
        np.add.at(gw, safe.reshape(-1)[keep], flat[keep])
        return (gw,)

    return record("embedding", (weight,), out, bw)


def conv1d_same(x, w, b=None):
    """Cross-correlation over time with zero "same" padding.

    ``x``: (T, C_in) or (B, T, C_in); ``w``: (W, C_in, C_out). Output
    position ``i`` reads inputs ``i - (W-1)//2 .. i + W//2``.
    """
    x, w = _t(x), _t(w)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or w.ndim != 3 or w.shape[1] != xd.shape[2]:
        raise ShapeError(f"conv1d_same: input {x.shape}, kernel {w.shape}")
    width, cin, cout = w.shape
    B, T, _ = xd.shape
    left = (width - 1) // 2
    padded = np.zeros((B, T + width - 1, cin), dtype=np.result_type(xd, w.data))
    padded[:, left:left + T] = xd
    cols = np.stack([padded[:, j:j + T] for j in range(width)], axis=2)  # B,T,W,C
    cols2 = cols.reshape(B * T, width * cin)
    out = (cols2 @ w.data.reshape(width * cin, cout)).reshape(B, T, cout)
    inputs = (x, w)
    if b is not None:
        b = _t(b)
        out = out + b.data
        inputs = (x, w, b)
    if squeeze:
        out = out[0]

    def bw(g):
        g3 = g[None] if squeeze else g
        g2 = g3.reshape(B * T, cout)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (g2 @ w.data.reshape(width * cin, cout).T).reshape(B, T, width, cin)
            gpad = np.zeros_like(padded)
            for j in range(width):
                gpad[:, j:j + T] += gcols[:, :, j]
            gx = gpad[:, left:left + T]
            gx = gx[0] if squeeze else gx
        if w.requires_grad:
            gw = (cols2.T @ g2).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0).reshape(b.shape)
        return (gx, gw, gb)[: len(inputs)]

    return record("conv1d_same", inputs, out, bw)


def _time_mask(x, mask):
    if mask is None:
        return np.ones(x.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match {x.shape[:2]}")
    if not mask.any(axis=1).all():
        raise ShapeError("every sequence needs at least one unmasked step")
    return mask


def max_over_time(x, mask=None):
    """(B, T, C) -> (B, C); masked steps never win, ties go to the earliest."""
    x = _t(x)
    if x.ndim != 3:
        raise ShapeError(f"max_over_time expects (B, T, C), got {x.shape}")
    m = _time_mask(x, mask)
    masked = np.where(m[..., None], x.data, -np.inf)
    idx = masked.argmax(axis=1)  # B, C
    out = np.take_along_axis(x.data, idx[:, None, :], axis=1)[:, 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return record("max_over_time", (x,), out, bw)


def mean_over_time(x, mask=None):
    """(B, T, C) -> (B, C), averaging only unmasked steps."""
    x = _t(x)
    if x.ndim != 3:
        raise ShapeError(f"mean_over_time expects (B, T, C), got {x.shape}")
    m = _time_mask(x, mask).astype(x.dtype)
    counts = m.sum(axis=1, keepdims=True)  # B,1
    weights = (m / counts)[..., None]
    out = (x.data * weights).sum(axis=1)
    return record("mean_over_time", (x,), out, lambda g: (g[:, None, :] * weights,))


# -- normalisation and losses --------------------------------------------------


def _log_softmax64(x):
    x64 = x.astype(np.float64)
    shifted = x64 - x64.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(a):
    a = _t(a)
    p64 = np.exp(_log_softmax64(a.data))
    out = p64.astype(a.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        gx = p64 * (g64 - (g64 * p64).sum(axis=-1, keepdims=True))
        return (gx.astype(a.dtype),)

    return record("softmax", (a,), out, bw)


def log_softmax(a):
    a = _t(a)
    lp64 = _log_softmax64(a.data)
    out = lp64.astype(a.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        gx = g64 - np.exp(lp64) * g64.sum(axis=-1, keepdims=True)
        return (gx.astype(a.dtype),)

    return record("log_softmax", (a,), out, bw)


def cross_entropy(logits, targets):
    """Mean softmax cross-entropy of (B, C) logits against int targets (B,).

    A 1-D logits vector is treated as a batch of one.
    """
    logits = _t(logits)
    targets = np.atleast_1d(np.asarray(targets))
    x = logits.data.reshape(1, -1) if logits.ndim == 1 else logits.data
    if x.ndim != 2 or targets.shape != (x.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    if targets.min() < 0 or targets.max() >= x.shape[1]:
        raise ShapeError("cross_entropy: target out of range")
    n = x.shape[0]
    lp = _log_softmax64(x)
    rows = np.arange(n)
    loss = -lp[rows, targets].mean()

    def bw(g):
        grad = np.exp(lp)
        grad[rows, targets] -= 1.0
        grad *= float(g) / n
        return (grad.reshape(logits.shape).astype(logits.dtype),)

    return record("cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), bw)


PRIMITIVES = (
        "add", "sub", "mul", "scale", "tanh", "sigmoid", "relu", "exp", "log",
        "matmul", "concat", "slice", "reshape", "sum", "mean", "embedding",
        "conv1d_same", "max_over_time", "mean_over_time", "softmax",
        "log_softmax", "cross_entropy",
)
