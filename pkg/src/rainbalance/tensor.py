"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive records its parents and a closure that maps the output
gradient to parent gradients.  ``backward`` replays the tape in reverse
topological order and accumulates into ``.grad`` of leaf tensors.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64, copy=True) if not isinstance(value, np.ndarray) \
        else value.astype(np.float64, copy=False)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Flat view of the stored values."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A named trainable leaf tensor."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(value, requires_grad: bool = False) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, requires_grad)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite output from {op} (shape {data.shape})")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# derivative helpers, kept at module level so tests can corrupt them deliberately
def _dsigmoid(y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


def _dtanh(y: np.ndarray) -> np.ndarray:
    return 1.0 - y * y


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(g, b.shape))

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(-g, b.shape))

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g, acc):
        acc(a, _unbroadcast(g * b.data, a.shape))
        acc(b, _unbroadcast(g * a.data, b.shape))

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g, acc):
        acc(a, _unbroadcast(g / b.data, a.shape))
        acc(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make("div", out, (a, b), bw)


def scalar_mul(a, c: float) -> Tensor:
    a = tensor(a)
    c = float(c)
    return _make("scalar_mul", a.data * c, (a,), lambda g, acc: acc(a, g * c))


def exp(a) -> Tensor:
    a = tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g, acc: acc(a, g * out))


def log(a) -> Tensor:
    a = tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g, acc: acc(a, g / a.data))


def sqrt(a) -> Tensor:
    a = tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g, acc: acc(a, g * 0.5 / out))


def square(a) -> Tensor:
    a = tensor(a)
    return _make("square", a.data * a.data, (a,), lambda g, acc: acc(a, 2.0 * g * a.data))


def tanh(a) -> Tensor:
    a = tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g, acc: acc(a, g * _dtanh(out)))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows; accurate to ~1 ulp of 1.0 in absolute terms,
    # so values below ~1e-16 round to 0 (fine for gates and probabilities)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = tensor(a)
    out = _sigmoid_np(a.data)
    return _make("sigmoid", out, (a,), lambda g, acc: acc(a, g * _dsigmoid(out)))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero where clipping is active."""
    a = tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clamp", out, (a,), lambda g, acc: acc(a, g * inside))


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``, gradient routed to ``soft`` unchanged."""
    hard = _as_array(hard)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: shapes {hard.shape} and {soft.shape} differ")
    return _make("straight_through", hard, (soft,), lambda g, acc: acc(soft, g))


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims), dtype=np.float64)

    def bw(g, acc):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        acc(a, np.broadcast_to(g, a.shape))

    return _make("sum", out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.data.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return scalar_mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along the last axis, with max subtraction."""
    a = tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, acc):
        acc(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make("softmax", out, (a,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product on the last two axes, numpy broadcasting elsewhere."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            acc(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make("matmul", out, (a, b), bw)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {a.shape}")
    return _make("transpose", np.swapaxes(a.data, -1, -2), (a,),
                 lambda g, acc: acc(a, np.swapaxes(g, -1, -2)))


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make("reshape", out, (a,), lambda g, acc: acc(a, g.reshape(a.shape)))


def broadcast(a, shape) -> Tensor:
    a = tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: {a.shape} cannot broadcast to {tuple(shape)}") from None
    return _make("broadcast", out, (a,), lambda g, acc: acc(a, _unbroadcast(g, a.shape)))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g, acc):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            acc(t, piece)

    return _make("concat", out, ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g, acc):
        for i, t in enumerate(ts):
            acc(t, np.take(g, i, axis=axis))

    return _make("stack", out, ts, bw)


def getitem(a, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    a = tensor(a)
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=np.float64)
    return _make("slice", out, (a,), lambda g, acc: acc(a, g, index))


slice_ = getitem


# ---------------------------------------------------------------- backward

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = {id(loss)}

    def acc(node: Tensor, g: np.ndarray, index=None) -> None:
        if not node.requires_grad:
            return
        key = id(node)
        if index is not None:
            if key not in grads:
                grads[key] = np.zeros(node.shape)
            elif key not in owned:
                grads[key] = np.array(grads[key], dtype=np.float64)
            owned.add(key)
            grads[key][index] += g
        elif key in grads:
            if key in owned:
                grads[key] += g
            else:
                grads[key] = grads[key] + g
                owned.add(key)
        else:
            grads[key] = g

    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.array(np.broadcast_to(g, node.shape), dtype=np.float64)
            node.grad = g if node.grad is None else node.grad + g
        else:
            node._backward(g, acc)
