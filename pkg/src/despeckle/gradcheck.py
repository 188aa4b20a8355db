"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensorcore import Tape, Tensor, backward


def numeric_grad(fn: Callable[[], Tensor], wrt: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to every element of ``wrt``."""
    out = np.zeros(wrt.data.shape, dtype=np.float64)
    flat = wrt.data.reshape(-1)
    grad_flat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        grad_flat[i] = (fp - fm) / (2 * h)
    return out


def analytic_grads(fn: Callable[[], Tensor], wrt: Sequence[Tensor]) -> list[np.ndarray]:
    with Tape() as tape:
        loss = fn()
    grads = backward(loss, tape)
    return [np.asarray(grads.get(t, np.zeros_like(t.data)), dtype=np.float64) for t in wrt]


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst elementwise error, scaled by the largest gradient magnitude of the pair."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(fn: Callable[[], Tensor], wrt: Sequence[Tensor], h: float = 1e-6) -> float:
    """Relative error of the analytic gradient over all tensors in ``wrt`` taken together.

    The error is scaled by the largest gradient magnitude across every tensor, so
    parameters whose gradient is exactly zero (a conv bias ahead of batch norm)
    are judged against the network-wide scale rather than their own round-off.
    ``fn`` must rebuild the computation from the current contents of ``wrt``;
    run it under ``default_dtype(np.float64)`` so the differences are meaningful.
    A small ``h`` keeps the probes from straddling ReLU kinks.
    """
    analytic = np.concatenate([g.ravel() for g in analytic_grads(fn, wrt)])
    numeric = np.concatenate([numeric_grad(fn, t, h).ravel() for t in wrt])
    return max_relative_error(analytic, numeric)
