"""Finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .core import NonFiniteError, Tape, Tensor, no_record


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    with no_record():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(x.copy())).item()
            flat[i] = orig - h
            fm = f(Tensor(x.copy())).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return g


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max over elements of ``|g_tape - g_fd| / max(1, |g_fd|)``.

    ``f`` maps a tensor to a scalar tensor. ``x`` is evaluated in double precision.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    if y.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    (g_tape,) = tape.gradient(y, [xt])
    if not np.isfinite(g_tape).all():
        raise NonFiniteError("grad_check: tape gradient is not finite")
    g_fd = numeric_grad(f, x, h)
    if not np.isfinite(g_fd).all():
        raise NonFiniteError("grad_check: finite-difference gradient is not finite")
    return float(np.max(np.abs(g_tape - g_fd) / np.maximum(1.0, np.abs(g_fd)))) if x.size else 0.0
