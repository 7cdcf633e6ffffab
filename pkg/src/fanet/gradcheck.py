"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-4,
                     indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. selected flat entries of ``x``.

    ``x.data`` is perturbed in place and restored.  Entries not in
    ``indices`` are left as NaN.
    """
    flat = x.data.reshape(-1)
    out = np.full(flat.shape, np.nan, dtype=np.float64)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f().data)
        flat[i] = orig - eps
        f_minus = float(f().data)
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2 * eps)
    return out.reshape(x.shape)


def finite_diff_check(f: Callable[[], Tensor], x: Tensor | Sequence[Tensor], eps: float = 1e-4,
                      floor: float = 1e-8, max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between ``backward()`` gradients and central differences.

    ``f`` is a zero-argument closure returning a scalar tensor that depends on
    ``x`` (one tensor or several).  With ``max_entries`` set, only that many
    randomly chosen entries per tensor are differenced, which keeps the check
    affordable for whole networks.
    """
    tensors = [x] if isinstance(x, Tensor) else list(x)
    for t in tensors:
        t.grad = None
    loss = f()
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        if max_entries is not None and t.size > max_entries:
            idx = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        else:
            idx = np.arange(t.size)
        numeric = numeric_gradient(f, t, eps, idx)
        err = relative_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx], floor)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
