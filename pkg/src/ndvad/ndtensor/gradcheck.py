"""Central finite-difference checks against the reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NumericError
from .tensor import Tensor, grad


def numeric_grad(fn: Callable[..., Tensor], points: Sequence[np.ndarray], eps: float = 1e-6) -> list:
    """Central differences of scalar ``fn`` for every coordinate of every point.

    Arguments are passed as grad-requiring tensors so that ``fn`` may take
    gradients internally (e.g. a loss evaluated after an inner update).
    """
    points = [np.array(p, dtype=np.float64) for p in points]
    out = []
    for k, p in enumerate(points):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(fn(*[Tensor(q, requires_grad=True) for q in points]))
            flat[i] = orig - eps
            fm = _scalar(fn(*[Tensor(q, requires_grad=True) for q in points]))
            flat[i] = orig
            d = (fp - fm) / (2 * eps)
            if not np.isfinite(d):
                raise NumericError(f"non-finite finite difference at argument {k}, flat index {i}")
            g.reshape(-1)[i] = d
        out.append(g)
    return out


def _scalar(t) -> float:
    v = t.item() if isinstance(t, Tensor) else float(t)
    return v


def grad_check(fn: Callable[..., Tensor], point, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``point`` is one array or a sequence of arrays (one per argument of ``fn``).
    """
    pts = [point] if isinstance(point, (np.ndarray, Tensor, float, int)) else list(point)
    pts = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in pts]
    leaves = [Tensor(p, requires_grad=True) for p in pts]
    out = fn(*leaves)
    analytic = grad(out, leaves)
    numeric = numeric_grad(fn, pts, eps)
    worst = 0.0
    for k, (a, n) in enumerate(zip(analytic, numeric)):
        a = np.zeros_like(n) if a is None else a.data
        if not np.all(np.isfinite(a)):
            bad = int(np.flatnonzero(~np.isfinite(a))[0])
            raise NumericError(f"NaN in analytic gradient at argument {k}, flat index {bad}")
        err = np.abs(a - n) / np.maximum(1.0, np.abs(a))
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst
