"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations a pre-activation residual network needs are provided.
Operations executed while a :class:`Tape` is active (``with Tape() as tape``)
are recorded whenever at least one input requires a gradient; calling
:func:`backward` replays the tape in reverse.

Shapes are explicit everywhere: apart from the bias in :func:`linear` there is
no broadcasting.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "BatchNormStats",
    "backward",
    "add",
    "mul",
    "scale",
    "sum_all",
    "relu",
    "detach",
    "conv2d",
    "batch_norm",
    "linear",
    "global_avg_pool",
    "softmax_cross_entropy",
]


class Tensor:
    """A dense row-major float64 array with an optional gradient slot.

    The value array is read-only. Optimizers swap in a fresh array through
    the ``data`` setter, which keeps the shape fixed.
    """

    __slots__ = ("_data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(())
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        arr = np.array(value, dtype=np.float64, order="C")
        if arr.shape != self._data.shape:
            raise ValueError(f"cannot assign shape {arr.shape} to tensor of shape {self._data.shape}")
        arr.flags.writeable = False
        self._data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self._data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered log of differentiable operations.

    Tapes are thread-confined: the active tape lives in thread-local storage,
    so independent passes may run on independent threads.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], back) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.records.append(_Record(inputs, result, back, op))
    return result


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a mapping from each leaf tensor requiring a gradient to its
    gradient array, and writes the same arrays into the leaves' ``grad``
    slots (overwriting, so replaying a tape twice is harmless).
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(r.output) for r in tape.records}
    if id(loss) not in produced:
        raise ValueError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}

    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
            if key not in produced:
                leaves[key] = inp

    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads.get(key, np.zeros(leaf.shape))
        leaf.grad = g
        result[leaf] = g
    return result


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x, factor: float) -> Tensor:
    x = _as_tensor(x)
    factor = float(factor)
    return _emit("scale", x.data * factor, (x,), lambda g: (g * factor,))


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _emit("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def detach(x) -> Tensor:
    """Same values, no gradient path."""
    return Tensor(_as_tensor(x).data)


# -- convolution -------------------------------------------------------------


def _out_size(size: int, k: int, stride: int, pad: int, axis: str) -> int:
    # floor semantics: a strided window that would run past the padded edge is dropped
    span = size + 2 * pad - k
    if span < 0:
        raise ValueError(f"conv2d: kernel {k} does not fit {axis} {size} with padding {pad}")
    return span // stride + 1


def conv2d(x, weight, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``weight[F,C,kh,kw]``."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d: input {x.shape} has {c} channels but weight {weight.shape} expects {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be positive and pad non-negative")
    ho = _out_size(h, kh, stride, pad, "height")
    wo = _out_size(w, kw, stride, pad, "width")

    # im2col in channels-last order: rows are output positions (n, i, j),
    # columns are (u, v, c) so every kernel tap copies contiguous channel runs
    xh = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((n, ho, wo, kh, kw, c))
    for u in range(kh):
        for v in range(kw):
            cols[:, :, :, u, v, :] = xh[:, u : u + stride * ho : stride, v : v + stride * wo : stride, :]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    w2 = weight.data.transpose(0, 2, 3, 1).reshape(f, kh * kw * c)
    out = (cols @ w2.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (g2.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        dcols = (g2 @ w2).reshape(n, ho, wo, kh, kw, c)
        dxh = np.zeros(xh.shape)
        for u in range(kh):
            for v in range(kw):
                dxh[:, u : u + stride * ho : stride, v : v + stride * wo : stride, :] += dcols[:, :, :, u, v, :]
        gx = dxh[:, pad : pad + h, pad : pad + w, :].transpose(0, 3, 1, 2)
        return np.ascontiguousarray(gx), np.ascontiguousarray(gw)

    return _emit("conv2d", np.ascontiguousarray(out), (x, weight), back)


# -- normalization -----------------------------------------------------------


@dataclass
class BatchNormStats:
    """Running per-channel statistics, updated in training mode only."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormStats":
        return cls(np.zeros(channels), np.ones(channels))


def batch_norm(
    x,
    gamma,
    beta,
    stats: Optional[BatchNormStats] = None,
    training: bool = True,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of ``x[N,C,H,W]``.

    ``momentum`` is the retention factor of the running averages:
    ``running <- momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 4:
        raise ValueError(f"batch_norm: expected [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: input {x.shape} needs gamma/beta of shape ({c},), got {gamma.shape}/{beta.shape}")
    gd = gamma.data.reshape(1, c, 1, 1)
    bd = beta.data.reshape(1, c, 1, 1)

    if training:
        m = n * h * w
        if m < 2:
            raise ValueError("batch_norm: training mode needs at least two values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if stats is not None:
            stats.mean = momentum * stats.mean + (1 - momentum) * mu
            stats.var = momentum * stats.var + (1 - momentum) * var * (m / (m - 1))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)

        def back(g):
            gxhat = g * gd
            s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv.reshape(1, c, 1, 1) / m) * (m * gxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        if stats is None:
            raise ValueError("batch_norm: evaluation mode needs running statistics")
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (x.data - stats.mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)

        def back(g):
            gx = g * gd * inv.reshape(1, c, 1, 1)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _emit("batch_norm", xhat * gd + bd, (x, gamma, beta), back)


# -- head --------------------------------------------------------------------


def linear(x, weight, bias) -> Tensor:
    """``x[N,D] @ weight[D,M] + bias[M]``."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: input {x.shape} does not conform to weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    return _emit(
        "linear",
        xd @ wd + bias.data,
        (x, weight, bias),
        lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)),
    )


def global_avg_pool(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool: expected [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _emit("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), back)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: expected [N,K] logits, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: labels shape {labels.shape} does not match logits {logits.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("softmax_cross_entropy: labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: label outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))

    def back(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return _emit("softmax_cross_entropy", np.array(loss), (logits,), back)
