"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` records its inputs and a
local gradient rule on the output. :func:`backward` linearises that record into
a :class:`Tape` (reverse topological order) and replays it once.

Gradient contract: ``backward`` *overwrites* ``.grad`` on every leaf it reaches
(and on every tensor passed through ``params``), so calling it twice on the
same graph without a new forward pass yields identical gradients.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def rule(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc

    def rule(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def rule(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), rule)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def rule(g):
        return (g * c,)

    return _make(a.data * c, (a,), rule)


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at exactly 0 is 0."""
    mask = x.data > 0.0

    def rule(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), rule)


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def rule(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(shape), (x,), rule)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def rule(g):
        return (np.transpose(g, inverse),)

    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), rule)


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[start:stop]`` along the first axis."""
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make(x.data[start:stop].copy(), (x,), rule)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def rule(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum()), (x,), rule)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = x.shape
    if axis is None:
        n = x.size

        def rule(g):
            return (np.full(shape, float(g) / n),)

        return _make(np.asarray(x.data.mean()), (x,), rule)

    n = shape[axis]

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _make(x.data.mean(axis=axis), (x,), rule)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with optional leading batch dimensions.

    ``a`` may be ``[..., m, k]`` against a 2-D ``b`` of ``[k, n]`` (weights), or
    both operands may share identical leading dims (attention scores).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), rule)


def frobenius_norm(x: Tensor) -> Tensor:
    """``sqrt(sum(x**2))``; gradient ``x / ||x||``, taken as 0 at the origin."""
    value = float(np.sqrt(np.sum(x.data * x.data)))

    def rule(g):
        if value == 0.0:
            return (np.zeros_like(x.data),)
        return (x.data * (float(g) / value),)

    return _make(np.asarray(value), (x,), rule)


# ---------------------------------------------------------------------------
# normalisation and losses (row kernels live in _kernels)
# ---------------------------------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    shape = x.shape
    y = _kernels.softmax_rows(x.data.reshape(-1, shape[-1]))

    def rule(g):
        dx = _kernels.softmax_rows_backward(y, np.ascontiguousarray(g).reshape(-1, shape[-1]))
        return (dx.reshape(shape),)

    return _make(y.reshape(shape), (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    shape = x.shape
    d = shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm expects gain/bias of shape ({d},), got {gain.shape}/{bias.shape}")
    y, xhat, rstd = _kernels.layer_norm_rows(x.data.reshape(-1, d), gain.data, bias.data, float(eps))

    def rule(g):
        dx, dgain, dbias = _kernels.layer_norm_rows_backward(
            np.ascontiguousarray(g).reshape(-1, d), xhat, rstd, gain.data
        )
        return dx.reshape(shape), dgain, dbias

    return _make(y.reshape(shape), (x, gain, bias), rule)


def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ValueError(f"got {labels.shape[0]} labels for a batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise ValueError(f"label {bad} outside [0, {num_classes})")
    return labels


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``, max-shifted for stability."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [batch, classes], got {logits.shape}")
    n, c = logits.shape
    if n == 0:
        raise ValueError("empty batch")
    labels = _check_labels(labels, n, c)
    loss, probs = _kernels.cross_entropy(logits.data, labels)

    def rule(g):
        return (_kernels.cross_entropy_backward(probs, labels, float(g)),)

    return _make(np.asarray(loss), (logits,), rule)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


class Tape:
    """Executed ops reachable from a root, in reverse topological order."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._linearise(root)

    @staticmethod
    def _linearise(root: Tensor) -> list:
        order: list = []
        seen: set = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        order.reverse()
        return order

    def leaves(self) -> list:
        return [n for n in self.nodes if n._backward is None]

    def run(self) -> None:
        grads = {id(self.root): np.ones_like(self.root.data)}
        for node in self.nodes:
            g = grads.pop(id(node), None)
            if node._backward is None:
                node.grad = np.zeros_like(node.data) if g is None else g
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> Tape:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Tensors listed in ``params`` that the loss does not reach get a zero grad.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.data)
    tape = Tape(loss)
    tape.run()
    return tape


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    The relative error per component is ``|a - n| / max(1, |a|, |n|)`` so that
    near-zero components are compared absolutely.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    x.requires_grad = True
    backward(f(x), params=[x])
    analytic = x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))
