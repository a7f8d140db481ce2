"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable quantity in the package is a :class:`Tensor`. Operations
record their parents and a closure that maps the output gradient to parent
gradients; :meth:`Tensor.backward` walks the graph in reverse topological order.
Only leaf tensors created with ``requires_grad=True`` retain ``.grad`` and it
accumulates across calls until :meth:`Tensor.zero_grad` is invoked.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "concat",
    "stack",
    "where",
    "maximum",
    "exp",
    "log",
    "softplus",
    "sigmoid",
    "softmax",
    "relu",
    "sqrt",
    "gather_rows",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NonFiniteError(ValueError):
    """A tensor would hold NaN or infinite values."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what}: non-finite values in array of shape {arr.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a} and {b} are not broadcast-compatible") from None


class Tensor:
    """A float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "__weakref__")

    __array_priority__ = 1000  # keep numpy from hijacking binary operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name or "Tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        _check_finite(data, op)
        out.data = data
        out.grad = None
        out.name = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # ------------------------------------------------------------------ info
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._from_op(self.data, (), None, "detach")

    def zero_grad(self) -> None:
        self.grad = None

    # -------------------------------------------------------------- backward
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ------------------------------------------------------------ arithmetic
    def __add__(self, other):
        other = as_tensor(other)
        _broadcast_shape(self.shape, other.shape, "add")
        sa, sb = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data, (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        _broadcast_shape(self.shape, other.shape, "subtract")
        sa, sb = self.shape, other.shape
        return Tensor._from_op(
            self.data - other.data, (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "subtract")

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        _broadcast_shape(self.shape, other.shape, "multiply")
        a, b = self.data, other.data
        need_a, need_b = self.requires_grad, other.requires_grad
        return Tensor._from_op(
            a * b, (self, other),
            lambda g: (_unbroadcast(g * b, a.shape) if need_a else None,
                       _unbroadcast(g * a, b.shape) if need_b else None), "multiply")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        _broadcast_shape(self.shape, other.shape, "divide")
        a, b = self.data, other.data
        if np.any(b == 0):
            raise NonFiniteError("divide: zero in denominator")
        out = a / b
        return Tensor._from_op(
            out, (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)), "divide")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "negate")

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("pow: only constant exponents are supported")
        p = float(exponent)
        x = self.data
        if p != int(p) and np.any(x < 0):
            raise NonFiniteError("pow: fractional power of a negative value")
        return Tensor._from_op(x ** p, (self,), lambda g: (g * p * x ** (p - 1),), "pow")

    def square(self) -> "Tensor":
        x = self.data
        return Tensor._from_op(x * x, (self,), lambda g: (2.0 * g * x,), "square")

    def abs(self) -> "Tensor":
        x = self.data
        return Tensor._from_op(np.abs(x), (self,), lambda g: (g * np.sign(x),), "abs")

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        try:
            out = a @ b
        except ValueError:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform") from None

        need_a, need_b = self.requires_grad, other.requires_grad

        def back(g):
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape) if need_a else None
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape) if need_b else None
            return ga, gb

        return Tensor._from_op(out, (self, other), back, "matmul")

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    # ------------------------------------------------------------- structure
    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._from_op(
            np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inv),), "transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return Tensor._from_op(
            np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {src} into {shape}") from None
        return Tensor._from_op(out, (self,), lambda g: (g.reshape(src),), "reshape")

    def __getitem__(self, index) -> "Tensor":
        if isinstance(index, Tensor):
            raise TypeError("index with numpy arrays, not Tensors")
        src = self.shape
        out = self.data[index]
        advanced = _is_advanced(index)

        def back(g):
            full = np.zeros(src)
            if advanced:
                np.add.at(full, index, g)
            else:
                full[index] = g
            return (full,)

        return Tensor._from_op(np.array(out), (self,), back, "slice")

    def broadcast_to(self, shape) -> "Tensor":
        src = self.shape
        return Tensor._from_op(
            np.broadcast_to(self.data, shape).copy(), (self,),
            lambda g: (_unbroadcast(g, src),), "broadcast")

    # ------------------------------------------------------------ reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        src = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return Tensor._from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        if count == 0:
            raise ShapeError(f"mean: empty reduction over shape {self.shape}")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def cumsum(self, axis: int = -1) -> "Tensor":
        def back(g):
            return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

        return Tensor._from_op(np.cumsum(self.data, axis=axis), (self,), back, "cumsum")

    # ---------------------------------------------------------- elementwise
    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def softplus(self) -> "Tensor":
        return softplus(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis)


def _is_advanced(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported as NonFiniteError below
        out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    d = x.data
    if np.any(d <= 0):
        raise NonFiniteError("log: input must be strictly positive")
    return Tensor._from_op(np.log(d), (x,), lambda g: (g / d,), "log")


def sqrt(x: Tensor) -> Tensor:
    d = x.data
    if np.any(d < 0):
        raise NonFiniteError("sqrt: negative input")
    out = np.sqrt(d)

    def back(g):
        if np.any(out == 0):
            raise NonFiniteError("sqrt: gradient undefined at zero")
        return (g * 0.5 / out,)

    return Tensor._from_op(out, (x,), back, "sqrt")


def _sigmoid_np(d: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * d))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    return Tensor._from_op(out, (x,), lambda g: (g * _sigmoid_np(d),), "softplus")


def maximum(x: Tensor, c: float) -> Tensor:
    """Elementwise ``max(x, c)`` against a constant; the gradient goes to ``x`` where ``x > c``."""
    d = x.data
    mask = d > c
    return Tensor._from_op(np.where(mask, d, c), (x,), lambda g: (g * mask,), "maximum")


def relu(x: Tensor) -> Tensor:
    return maximum(x, 0.0)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), back, "softmax")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=ax), tensors, back, "concat")


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(t.reshape(tuple(shape)))
    return concat(expanded, axis=axis)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    shape = np.broadcast_shapes(mask.shape, a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def back(g):
        g = np.broadcast_to(g, shape)
        return (_unbroadcast(np.where(mask, g, 0.0), sa), _unbroadcast(np.where(mask, 0.0, g), sb))

    return Tensor._from_op(np.where(mask, a.data, b.data), (a, b), back, "where")


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``x[index]`` along axis 0 with a scatter-add backward that tolerates repeats."""
    index = np.asarray(index, dtype=np.int64)
    src = x.shape
    rows = src[0]
    inner = int(np.prod(src[1:])) if len(src) > 1 else 1

    def back(g):
        flat = g.reshape(-1, inner)
        idx = index.reshape(-1)
        full = np.empty((rows, inner))
        for k in range(inner):
            full[:, k] = np.bincount(idx, weights=flat[:, k], minlength=rows)
        return (full.reshape(src),)

    return Tensor._from_op(x.data[index], (x,), back, "gather")


def permute_rows(x: Tensor, perm: np.ndarray) -> Tensor:
    """``x[perm]`` along axis 0 for a permutation ``perm``; the backward is the inverse scatter."""
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (x.shape[0],):
        raise ShapeError(f"permute_rows: permutation of length {perm.shape} for {x.shape[0]} rows")

    def back(g):
        full = np.empty_like(g)
        full[perm] = g
        return (full,)

    return Tensor._from_op(x.data[perm], (x,), back, "permute")
