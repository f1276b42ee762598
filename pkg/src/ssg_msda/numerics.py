"""Minimal reverse-mode differentiation over float64 numpy arrays.

The graph is recorded dynamically: every operation on a :class:`Tensor` that
requires a gradient returns a node holding its parents and a local backward
rule. :func:`backward` sweeps the nodes in reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_CLAMP = 1e-12

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operation."""


class NumericsDomainError(ValueError):
    """An input lies outside the domain of the operation (e.g. log of 0)."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a tensor or a gradient."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {what}")


class Tensor:
    """Dense float64 array that may take part in a recorded computation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, _op: str = ""):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, _op or "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> Tensor:
        return mean(self, axis=axis)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """Trainable leaf tensor with an always-allocated gradient buffer."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> Tensor:
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op)
    return Tensor(data, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a, clamp: float | None = None) -> Tensor:
    """Natural log. Without ``clamp`` non-positive input is an error; with it,
    inputs below ``clamp`` are raised to ``clamp`` and receive zero gradient."""
    a = as_tensor(a)
    if clamp is None:
        if (a.data <= 0).any():
            raise NumericsDomainError("log of non-positive value")
        x = a.data
        return _make(np.log(x), (a,), lambda g: (g / x,), "log")
    keep = a.data >= clamp
    x = np.where(keep, a.data, clamp)
    return _make(np.log(x), (a,), lambda g: (np.where(keep, g / x, 0.0),), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def clip_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= lo
    return _make(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clip_min")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    if p < 1 and (a.data <= 0).any():
        raise NumericsDomainError(f"power {p} of non-positive value")
    out = a.data**p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "power")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "exp": exp, "log": log, "relu": relu, "scale": scale}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name to one of add, sub, mul, exp, log, relu, scale."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), back, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError("mean of an empty tensor")
    return scale(sum_(a, axis=axis), 1.0 / count)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` (duplicates allowed)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise IndexError(f"take: index out of range for axis {axis} of size {a.shape[axis]}")
    out = np.take(a.data, idx, axis=axis)

    def back(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(out, (a,), back, "take")


def pick(a, labels) -> Tensor:
    """Row-wise selection ``a[i, labels[i]]`` from a matrix."""
    a = as_tensor(a)
    lab = np.asarray(labels, dtype=np.int64)
    if a.ndim != 2 or lab.shape != (a.shape[0],):
        raise ShapeError(f"pick: need a matrix and one label per row, got {a.shape} and {lab.shape}")
    rows = np.arange(a.shape[0])
    out = a.data[rows, lab]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, lab), g)
        return (full,)

    return _make(out, (a,), back, "pick")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of no tensors")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# normalized exponentials


def softmax(logits, axis: int = -1) -> Tensor:
    a = as_tensor(logits)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis, shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(logits, axis: int = -1) -> Tensor:
    a = as_tensor(logits)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError(f"log_softmax over an empty axis, shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)
    return _make(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------------------
# differentiation and optimization


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires a gradient")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    """Plain SGD update in place; gradients are left for the caller to zero."""
    params = list(params)
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient in parameter {p.name or p!r}")
    for p in params:
        p.data -= lr * p.grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    finite: bool = True

    def passed(self, tol: float) -> bool:
        return self.finite and self.max_rel_error <= tol


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    Error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Parameter values are restored exactly after probing.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = list(params)
    zero_grad(params)
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() for p in params]
    zero_grad(params)

    report = GradCheckReport(0.0, "", ())
    with no_grad():
        for k, p in enumerate(params):
            name = p.name or f"param{k}"
            for idx in np.ndindex(p.shape):
                orig = p.data[idx]
                try:
                    p.data[idx] = orig + h
                    up = f().item()
                    p.data[idx] = orig - h
                    down = f().item()
                except NonFiniteError:
                    return GradCheckReport(float("inf"), name, idx, finite=False)
                finally:
                    p.data[idx] = orig
                numeric = (up - down) / (2 * h)
                a = analytic[k][idx]
                err = abs(a - numeric) / max(1.0, abs(a))
                if not np.isfinite(err):
                    return GradCheckReport(float("inf"), name, idx, finite=False)
                if err > report.max_rel_error or not report.worst_param:
                    report = GradCheckReport(float(err), name, idx)
    return report
