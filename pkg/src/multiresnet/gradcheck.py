"""Central finite-difference oracle for the autodiff engine.

The oracle only ever evaluates forward values, so it stays independent of
the backward rules it checks.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward

#: Denominator floor for the relative error of near-zero gradient entries.
REL_FLOOR = 1e-6


def numerical_gradient(fn: Callable[[], float], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn / d tensor by central differences, perturbing one entry at a time."""
    base = tensor.data.copy()
    grad = np.zeros(base.size)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        tensor.data = base
        plus = fn()
        flat[i] = orig - h
        tensor.data = base
        minus = fn()
        flat[i] = orig
        grad[i] = (plus - minus) / (2 * h)
    tensor.data = base
    return grad.reshape(base.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    build: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5
) -> dict[str, float]:
    """Compare tape gradients of the scalar ``build()`` with finite differences.

    Returns the worst per-element relative error for each input (keyed by
    the tensor's name, or its position).
    """
    with Tape() as tape:
        loss = build()
    grads = backward(tape, loss)

    def value() -> float:
        return float(build().data)

    worst = {}
    for pos, t in enumerate(inputs):
        analytic = grads.get(t, np.zeros(t.shape))
        numeric = numerical_gradient(value, t, h)
        worst[t.name or str(pos)] = float(relative_error(analytic, numeric).max())
    return worst
