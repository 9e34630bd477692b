"""Central finite-difference checking of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

from .tensor import Tape, Tensor

Inputs = Union[Tensor, Sequence[Tensor]]


def _as_list(x: Inputs) -> list:
    return [x] if isinstance(x, Tensor) else list(x)


def analytic_grad(f: Callable, x: Inputs) -> list:
    """Run ``f(x)`` on a fresh tape and return d f / d t for every tensor in ``x``."""
    xs = _as_list(x)
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            out = f(x)
        tape.backward(out)
        return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad, t.grad = rg, g


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def finite_diff_check(f: Callable, x: Inputs, eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps ``x`` (a tensor or a list of tensors, passed through unchanged)
    to a scalar tensor.  Every coordinate of every tensor in ``x`` is perturbed
    in place by +-eps and restored afterwards.  Inputs should be float64.
    """
    xs = _as_list(x)
    analytic = analytic_grad(f, x)
    worst = 0.0
    for t, a in zip(xs, analytic):
        flat = t.data.reshape(-1)
        num = np.empty(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite value while perturbing coordinate {i}")
            num[i] = (fp - fm) / (2 * eps)
        if flat.size:
            worst = max(worst, float(relative_error(a.reshape(-1), num).max()))
    return worst
