"""Central finite-difference checks against reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, indices: Sequence[int] | None = None,
                   eps: float = 1e-5) -> np.ndarray:
    """d fn() / d t.data at the given flat indices (all of them by default)."""
    flat = t.data.reshape(-1)
    indices = range(flat.size) if indices is None else indices
    out = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn().item()
        flat[i] = orig - eps
        lo = fn().item()
        flat[i] = orig
        out.append((hi - lo) / (2 * eps))
    return np.asarray(out)


def analytic_grad(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None,
                    floor: float = 1e-8) -> float:
    """Worst relative error between analytic and numerical gradients.

    With ``max_entries`` set, a random subset of entries per input is checked.
    """
    grads = analytic_grad(fn, inputs)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t, g in zip(inputs, grads):
        idx = np.arange(t.size)
        if max_entries is not None and t.size > max_entries:
            idx = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        num = numerical_grad(fn, t, idx, eps)
        worst = max(worst, rel_error(g.reshape(-1)[idx], num, floor))
    return worst
