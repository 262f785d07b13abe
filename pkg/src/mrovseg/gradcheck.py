"""Central finite-difference gradient checking in 64-bit precision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error < self.tol)


def numerical_gradient(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-4) -> np.ndarray:
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    g = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; zero when both gradients vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], name: str = "",
                    h: float = 1e-4, tol: float = 1e-4, max_entries: int = 0) -> GradCheckResult:
    """Compare reverse-mode gradients of scalar ``fn()`` with central differences.

    ``inputs`` should be float64 tensors with ``requires_grad=True``. With
    ``max_entries > 0`` only that many randomly chosen coordinates of each
    input are perturbed, which keeps big composite checks affordable.
    """
    for t in inputs:
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    num_all, ana_all = [], []
    for t, a in zip(inputs, analytic):
        if max_entries and t.data.size > max_entries:
            rng = np.random.default_rng(t.data.size)
            idx = rng.choice(t.data.size, size=max_entries, replace=False)
            num = _partial_numeric(fn, t, idx, h)
            num_all.append(num)
            ana_all.append(a.reshape(-1)[idx])
        else:
            num_all.append(numerical_gradient(fn, t, h).reshape(-1))
            ana_all.append(a.reshape(-1))
    worst = relative_error(np.concatenate(ana_all), np.concatenate(num_all))
    return GradCheckResult(name, worst, tol)


def _partial_numeric(fn, t: Tensor, idx: np.ndarray, h: float) -> np.ndarray:
    flat = t.data.reshape(-1)
    out = np.zeros(len(idx))
    with no_grad():
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            out[n] = (fp - fm) / (2 * h)
    return out
