"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Just enough machinery for a small transformer encoder and its losses: a
``Tensor`` wraps an ndarray and records the backward closure of the op that
produced it.  ``Tensor.backward()`` walks the graph in reverse topological
order and accumulates gradients into every tensor with ``requires_grad``.

Everything is float64.  Ops are deterministic, so identical inputs always
produce bit-identical outputs and gradients.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An ndarray node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction -------------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"],
              backward: Callable[[np.ndarray], None] | None) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __truediv__(self, scalar: float):
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, rng: np.random.Generator | None = None) -> Tensor:
    """A trainable tensor (requires_grad=True)."""
    t = Tensor(data)
    t.requires_grad = True
    return t


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(grad):
        a._accumulate(_unbroadcast(grad, a.data.shape))
        b._accumulate(_unbroadcast(grad, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(grad):
        a._accumulate(_unbroadcast(grad * b.data, a.data.shape))
        b._accumulate(_unbroadcast(grad * a.data, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product; batch dimensions, when present, must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data @ b.data

    def backward(grad):
        a._accumulate(_unbroadcast(grad @ b.data.swapaxes(-1, -2), a.data.shape))
        b._accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ grad, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old_shape = x.data.shape
    out_data = x.data.reshape(shape)

    def backward(grad):
        x._accumulate(grad.reshape(old_shape))

    return Tensor._make(out_data, (x,), backward)


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    inverse = np.argsort(axes)
    out_data = x.data.transpose(axes)

    def backward(grad):
        x._accumulate(grad.transpose(inverse))

    return Tensor._make(out_data, (x,), backward)


def take_rows(x, indices) -> Tensor:
    """Gather rows along axis 0 (embedding lookup / position gather)."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    out_data = x.data[idx]

    def backward(grad):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, grad)
        x._accumulate(full)

    return Tensor._make(out_data, (x,), backward)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors into a matrix, one per row."""
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=0)

    def backward(grad):
        for i, t in enumerate(tensors):
            t._accumulate(grad[i])

    return Tensor._make(out_data, tuple(tensors), backward)


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(grad):
        g = grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    return Tensor._make(out_data, (x,), backward)


def reduce_mean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    count = x.data.size if axis is None else x.data.shape[axis]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out_data = 0.5 * (1.0 + np.tanh(0.5 * x.data))  # numerically stable sigmoid

    def backward(grad):
        x._accumulate(grad * out_data * (1.0 - out_data))

    return Tensor._make(out_data, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh-approximated GELU; smooth everywhere, which keeps finite
    differences well behaved."""
    x = _as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out_data = 0.5 * v * (1.0 + t)

    def backward(grad):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        local = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * d_inner
        x._accumulate(grad * local)

    return Tensor._make(out_data, (x,), backward)


def log(x) -> Tensor:
    x = _as_tensor(x)
    out_data = np.log(x.data)

    def backward(grad):
        x._accumulate(grad / x.data)

    return Tensor._make(out_data, (x,), backward)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through only inside the open interval."""
    x = _as_tensor(x)
    out_data = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)

    def backward(grad):
        x._accumulate(grad * inside)

    return Tensor._make(out_data, (x,), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(grad):
        dot = (grad * out_data).sum(axis=axis, keepdims=True)
        x._accumulate((grad - dot) * out_data)

    return Tensor._make(out_data, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out_data = gain.data * xhat + bias.data
    n = v.shape[-1]

    def backward(grad):
        if gain.requires_grad:
            gain._accumulate(
                _unbroadcast(grad * xhat, gain.data.shape)
            )
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(grad, bias.data.shape))
        if x.requires_grad:
            dxhat = grad * gain.data
            dx = (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            ) * inv_std
            x._accumulate(dx)

    return Tensor._make(out_data, (x, gain, bias), backward)


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    x = _as_tensor(x)
    if rate <= 0.0:
        return x
    keep = rng.random(x.data.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep * scale
    out_data = x.data * mask

    def backward(grad):
        x._accumulate(grad * mask)

    return Tensor._make(out_data, (x,), backward)


def euclidean_distance(a, b) -> Tensor:
    """||a - b||_2 as a scalar, with subgradient 0 at exact equality."""
    a, b = _as_tensor(a), _as_tensor(b)
    diff = a.data - b.data
    norm = float(np.sqrt((diff**2).sum()))
    out_data = np.asarray(norm)

    def backward(grad):
        if norm > 0.0:
            g = (grad / norm) * diff
        else:
            g = np.zeros_like(diff)
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


def cross_entropy_with_logits(logits, targets) -> Tensor:
    """Mean softmax cross-entropy of a logits matrix against index targets."""
    logits = _as_tensor(logits)
    idx = np.asarray(targets, dtype=np.int64)
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + z.max(
        axis=1, keepdims=True
    )
    rows = np.arange(z.shape[0])
    losses = lse[rows, 0] - z[rows, idx]
    out_data = np.asarray(losses.mean())
    probs = np.exp(z - lse)

    def backward(grad):
        g = probs.copy()
        g[rows, idx] -= 1.0
        logits._accumulate(grad * g / z.shape[0])

    return Tensor._make(out_data, (logits,), backward)
