"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5,
                   indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (mutated in place, restored).

    Only the flat positions in ``indices`` are perturbed when given; the
    remaining entries of the result are left at zero.
    """
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    positions = range(flat.size) if indices is None else indices
    with no_grad():
        for j in positions:
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f().data)
            flat[j] = orig - h
            fm = float(f().data)
            flat[j] = orig
            out[j] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_j |a_j - n_j| / max(|a_j|, |n_j|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def finite_diff_check(f: Callable[[], Tensor], x: Tensor | Sequence[Tensor], h: float = 1e-5,
                      max_entries: int | None = None, rng: np.random.Generator | None = None,
                      floor: float = 1e-6) -> float:
    """Max relative error between backward gradients and central differences.

    ``f`` is re-evaluated with no arguments, so it must close over ``x``.
    With ``max_entries`` set, a random subset of that many entries per
    tensor is checked (``rng`` picks them).
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    loss = f()
    loss.backward()
    worst = 0.0
    for t in xs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        indices = None
        if max_entries is not None and t.size > max_entries:
            rng = rng or np.random.default_rng(0)
            indices = rng.choice(t.size, size=max_entries, replace=False)
        numeric = numerical_grad(f, t, h, indices)
        if indices is not None:
            a = analytic.reshape(-1)[indices]
            n = numeric.reshape(-1)[indices]
        else:
            a, n = analytic, numeric
        worst = max(worst, relative_error(a, n, floor))
    return worst
