"""Central finite-difference gradient checking (run under float64)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5,
                   indices: Sequence[int] | None = None) -> np.ndarray:
    """d fn() / d param by central differences at the given flat ``indices`` (all if None)."""
    flat = param.data.reshape(-1)
    out = np.zeros(flat.size)
    idx = range(flat.size) if indices is None else indices
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn().data.sum())
            flat[i] = orig - step
            lo = float(fn().data.sum())
            flat[i] = orig
            out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise then maximised."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None,
                    floor: float = 1e-6) -> float:
    """Worst relative error between backprop and finite differences over ``params``.

    ``fn`` must rebuild the graph from the current parameter values and return a
    tensor whose sum is the scalar being differentiated. With ``max_entries`` a
    random subset of each parameter's entries is checked.
    """
    for p in params:
        p.grad = None
    out = fn()
    loss = out if out.size == 1 else out.sum()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        n = p.size
        if max_entries is not None and n > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idx = np.arange(n)
        numeric = numerical_grad(fn, p, step, idx).reshape(-1)[idx]
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], numeric, floor))
    return worst
