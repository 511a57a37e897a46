"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only what the networks and penalties in this package need: 0-d, 1-d and 2-d
arrays, scalar broadcasting, and a handful of fused primitives (softmax over
columns, column-wise max of absolute values, column-vector bias add).

Every operation records its parents and a backward rule on the output
tensor; :func:`backward` walks that graph in reverse topological order.
The graph is rebuilt on every forward pass, so alternating updates of
different parameter groups need no bookkeeping.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value in {what}")


class Tensor:
    """A float64 array that may participate in gradient computation.

    Leaves created with ``requires_grad=True`` own a ``grad`` buffer of the
    same shape that accumulates across :func:`backward` calls until zeroed.
    Intermediate results never retain gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are at most 2-d, got shape {arr.shape}")
        _check_finite(arr, name or "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        _check_finite(data, f"output of {op}")
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        out.grad = None
        out._op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting is supported)")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), back, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0  # relu'(0) = 0

    def back(g):
        return (g * mask,)

    return Tensor._result(np.where(mask, x.data, 0.0), (x,), back, "relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def back(g):
        return (g * out,)

    return Tensor._result(out, (x,), back, "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError("log of a non-positive value")

    def back(g):
        return (g / x.data,)

    return Tensor._result(np.log(x.data), (x,), back, "log")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "maximum")
    pick_a = a.data >= b.data

    def back(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._result(np.maximum(a.data, b.data), (a, b), back, "maximum")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)

    def back(g):
        return (g * sign,)

    return Tensor._result(np.abs(x.data), (x,), back, "abs")


def square(x: Tensor) -> Tensor:
    def back(g):
        return (2.0 * g * x.data,)

    return Tensor._result(x.data * x.data, (x,), back, "square")


def clip_min(x: Tensor, lo: float) -> Tensor:
    """``max(x, lo)`` against a constant floor; no gradient where clipped."""
    keep = x.data > lo

    def back(g):
        return (g * keep,)

    return Tensor._result(np.where(keep, x.data, lo), (x,), back, "clip_min")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "max": maximum,
    "abs": abs,
    "square": square,
}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch one of the named elementwise primitives."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(_product(a.data, b.data), (a, b), back, "matmul")


def _product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # a lone column would take the matrix-vector kernel, whose rounding differs
    # from the matrix-matrix one; widen it so results never depend on batch size
    if b.shape[1] == 1:
        return (a @ np.repeat(b, 2, axis=1))[:, :1]
    return a @ b


def transpose(x: Tensor) -> Tensor:
    def back(g):
        return (g.T,)

    return Tensor._result(x.data.T.copy(), (x,), back, "transpose")


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        def back(g):
            return (np.broadcast_to(g, x.shape).copy(),)

        return Tensor._result(np.asarray(x.data.sum()), (x,), back, "sum")
    if x.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"sum over axis {axis} needs a 2-d tensor, got {x.shape}")

    def back_axis(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor._result(x.data.sum(axis=axis), (x,), back_axis, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return sum(x, axis) * (1.0 / n)


def take_row(x: Tensor, i: int) -> Tensor:
    """Row ``i`` of a 2-d tensor as a 1-d tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"take_row needs a 2-d tensor, got {x.shape}")

    def back(g):
        full = np.zeros_like(x.data)
        full[i] = g
        return (full,)

    return Tensor._result(x.data[i].copy(), (x,), back, "take_row")


def add_colvec(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-m vector to every column of an m-by-n matrix."""
    if x.data.ndim != 2 or b.shape != (x.shape[0],):
        raise ShapeError(f"add_colvec: bias {b.shape} does not match rows of {x.shape}")

    def back(g):
        return g, g.sum(axis=1)

    return Tensor._result(x.data + b.data[:, None], (x, b), back, "add_colvec")


def softmax_cols(x: Tensor) -> Tensor:
    """Column-wise softmax, computed after subtracting each column's max."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_cols needs a 2-d tensor, got {x.shape}")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=0, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=0, keepdims=True)),)

    return Tensor._result(s, (x,), back, "softmax_cols")


def colmax_abs(x: Tensor) -> Tensor:
    """Per-column max of ``|x|``; the subgradient goes to the lowest-index maximal row."""
    if x.data.ndim != 2:
        raise ShapeError(f"colmax_abs needs a 2-d tensor, got {x.shape}")
    a = np.abs(x.data)
    rows = np.argmax(a, axis=0)  # first maximal index
    cols = np.arange(x.shape[1])
    sign = np.sign(x.data[rows, cols])

    def back(g):
        full = np.zeros_like(x.data)
        full[rows, cols] = g * sign
        return (full,)

    return Tensor._result(a[rows, cols], (x,), back, "colmax_abs")


# ---------------------------------------------------------------- backward


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: list[Tensor] = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            leaves.append(node)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for leaf in leaves:
        _check_finite(leaf.grad, f"gradient of {leaf.name or 'leaf'}")


# ---------------------------------------------------------------- updates


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def _finite_grad(p: Tensor, i: int) -> np.ndarray:
    if p.grad is None:
        raise ContractError(f"parameter {p.name or i} does not require grad")
    if not np.all(np.isfinite(p.grad)):
        raise NumericError(f"non-finite gradient in parameter {p.name or i}")
    return p.grad


def sgd_step(params: Sequence[Tensor], rate: float) -> None:
    """``p -= rate * grad`` for each parameter, then zero the gradients."""
    if rate < 0:
        raise ContractError(f"learning rate must be non-negative, got {rate}")
    grads = [_finite_grad(p, i) for i, p in enumerate(params)]
    for p, g in zip(params, grads):
        if rate:
            p.data -= rate * g
        p.grad.fill(0.0)


def clamp_(t: Tensor, lo: float, hi: float) -> None:
    """Clip the entries of ``t`` into ``[lo, hi]`` in place (not recorded)."""
    if lo > hi:
        raise ContractError(f"clamp bounds inverted: lo={lo} > hi={hi}")
    np.clip(t.data, lo, hi, out=t.data)


class Adam:
    """Adam with per-parameter moment buffers.

    Offered as an alternative to :func:`sgd_step`; the state is exposed as
    plain arrays so checkpoints can persist it.
    """

    def __init__(self, rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.rate, self.beta1, self.beta2, self.eps = rate, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Sequence[Tensor]) -> None:
        grads = [_finite_grad(p, i) for i, p in enumerate(params)]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g in zip(params, grads):
            m = self.m.setdefault(p.name, np.zeros_like(p.data))
            v = self.v.setdefault(p.name, np.zeros_like(p.data))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad.fill(0.0)


class RMSProp:
    """RMSProp, the optimizer customarily paired with weight-clipped critics."""

    def __init__(self, rate: float, decay: float = 0.9, eps: float = 1e-8):
        self.rate, self.decay, self.eps = rate, decay, eps
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Sequence[Tensor]) -> None:
        grads = [_finite_grad(p, i) for i, p in enumerate(params)]
        for p, g in zip(params, grads):
            v = self.v.setdefault(p.name, np.zeros_like(p.data))
            v *= self.decay
            v += (1.0 - self.decay) * g * g
            p.data -= self.rate * g / (np.sqrt(v) + self.eps)
            p.grad.fill(0.0)
