"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .core import Graph, NonFiniteError, Tensor


def _scalar(y):
    v = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if v.size != 1:
        raise ValueError("gradient check needs a scalar-valued function")
    v = float(v.reshape(-1)[0])
    if not np.isfinite(v):
        raise NonFiniteError("finite_diff_check probe")
    return v


def analytic_grad(f, x):
    """Gradient of scalar ``f`` at ``x`` via the tape, in float64."""
    leaf = Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                  requires_grad=True)
    with Graph() as g:
        y = f(leaf)
        g.backward(y)
    return np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad


def numeric_grad(f, x, eps=1e-3):
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = _scalar(f(Tensor(x0)))
        flat[i] = orig - eps
        down = _scalar(f(Tensor(x0)))
        flat[i] = orig
        out.reshape(-1)[i] = (up - down) / (2.0 * eps)
    return out


def finite_diff_check(f, x, eps=1e-3):
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|)."""
    a = analytic_grad(f, x)
    n = numeric_grad(f, x, eps)
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a))))
