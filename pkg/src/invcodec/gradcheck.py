"""Central finite-difference checks for tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor

FD_STEP = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|n|, 1e-12)."""
    scale = max(float(np.abs(numeric).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def numeric_gradient(fn: Callable[[], Tensor], x: Tensor, step: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to ``x`` (perturbed in place)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn().data)
        flat[i] = orig - step
        lo = float(fn().data)
        flat[i] = orig
        grad.reshape(-1)[i] = (hi - lo) / (2 * step)
    return grad


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor],
                    step: float = FD_STEP) -> list[float]:
    """Relative error of the tape gradient of ``fn()`` for each input tensor.

    ``fn`` must read the inputs' current data on every call. Inputs should be
    float64 so the differences are not dominated by rounding.
    """
    for t in inputs:
        t.requires_grad = True
    with Tape() as tape:
        loss = fn()
    analytic = tape.gradient(loss, list(inputs))
    return [relative_error(a, numeric_gradient(fn, t, step)) for a, t in zip(analytic, inputs)]


def weighted_sum(out: Tensor, seed: int = 0) -> Tensor:
    """Scalar projection of ``out`` with fixed random weights, so every element matters."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * Tensor(w, dtype=out.dtype)).sum()
