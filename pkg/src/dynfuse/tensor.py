"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its inputs and a backward closure on the
output tensor. ``backward`` linearises the recorded graph into a :class:`Tape`
(topological order) and accumulates gradients in reverse.

Operations that perform multiply-accumulates report them to the active
:class:`MaddsCounter`, which is how inference cost is audited against the
analytic cost tables.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "MaddsCounter",
    "count_madds",
    "tensor",
    "matmul",
    "affine",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "tanh",
    "activation",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "max_index",
    "concat",
    "reshape",
    "take_rows",
    "column",
    "scale_rows",
    "elementwise",
    "reduce",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


# ---------------------------------------------------------------------------
# MAdds instrumentation

class MaddsCounter:
    """Tallies scalar multiply-accumulates executed by tensor operations."""

    def __init__(self) -> None:
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


_COUNTERS: list[MaddsCounter] = []


@contextlib.contextmanager
def count_madds() -> Iterator[MaddsCounter]:
    """Count every multiply-accumulate executed inside the block.

    >>> with count_madds() as c:
    ...     _ = matmul(tensor([[1.0, 2.0]]), tensor([[3.0], [4.0]]))
    >>> c.total
    2
    """
    counter = MaddsCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def _tally(op: str, n: int) -> None:
    for c in _COUNTERS:
        c.add(op, n)


# ---------------------------------------------------------------------------
# Tensor

class Tensor:
    """A dense row-major float64 array that can take part in backpropagation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Iterator[tuple[Tensor, np.ndarray]]] | None = None
        self._op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=np.float64)
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out.name = None
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = None
        out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

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
        return mul(-1.0, self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape and backward

@dataclass
class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, root: Tensor) -> Tape:
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Gradients add to whatever is already stored, so repeated calls without
    zeroing accumulate.
    """
    if loss.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node._accumulate(g)
        if node._backward is None:
            continue
        for parent, pg in node._backward(g):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = np.array(pg, dtype=np.float64, copy=True)


# ---------------------------------------------------------------------------
# Linear algebra

def _rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # One BLAS call per row: a row's result never depends on its batch-mates,
    # which keeps sub-batch routing bit-identical to full-batch execution.
    return np.matmul(a[:, None, :], b)[:, 0, :]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an (m, k) and a (k, n) tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    _tally("matmul", m * k * n)
    out = Tensor._result(_rowwise_matmul(a.data, b.data), (a, b), "matmul")

    def _backward(g: np.ndarray):
        yield a, g @ b.data.T
        yield b, a.data.T @ g

    out._backward = _backward
    return out


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with the bias row added to every sample.

    Only the product is counted as MAdds; bias additions are excluded by the
    counting convention.
    """
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"affine shape mismatch: {x.shape} x {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    m, k = x.shape
    n = weight.shape[1]
    _tally("affine", m * k * n)
    out = Tensor._result(_rowwise_matmul(x.data, weight.data) + bias.data, (x, weight, bias), "affine")

    def _backward(g: np.ndarray):
        yield x, g @ weight.data.T
        yield weight, x.data.T @ g
        yield bias, g.sum(axis=0)

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# Elementwise

def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.full(t.shape, g.sum())


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    res = a.data + b.data
    _tally("add", res.size)
    out = Tensor._result(res, (a, b), "add")

    def _backward(g: np.ndarray):
        yield a, _unbroadcast(g, a)
        yield b, _unbroadcast(g, b)

    out._backward = _backward
    return out


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    res = a.data - b.data
    _tally("sub", res.size)
    out = Tensor._result(res, (a, b), "sub")

    def _backward(g: np.ndarray):
        yield a, _unbroadcast(g, a)
        yield b, _unbroadcast(-g, b)

    out._backward = _backward
    return out


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    res = a.data * b.data
    _tally("mul", res.size)
    out = Tensor._result(res, (a, b), "mul")

    def _backward(g: np.ndarray):
        yield a, _unbroadcast(g * b.data, a)
        yield b, _unbroadcast(g * a.data, b)

    out._backward = _backward
    return out


def elementwise(op: str, a, b) -> Tensor:
    """Dispatch ``op`` in {add, mul, sub}."""
    try:
        fn = {"add": add, "mul": mul, "sub": sub}[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row ``i`` of an (n, d) tensor by ``s[i]``."""
    if x.ndim != 2 or s.shape != (x.shape[0],):
        raise DimensionError(f"scale_rows shape mismatch: {x.shape} and {s.shape}")
    res = x.data * s.data[:, None]
    _tally("scale_rows", res.size)
    out = Tensor._result(res, (x, s), "scale_rows")

    def _backward(g: np.ndarray):
        yield x, g * s.data[:, None]
        yield s, (g * x.data).sum(axis=1)

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# Nonlinearities

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    out = Tensor._result(np.where(mask, x.data, 0.0), (x,), "relu")

    def _backward(g: np.ndarray):
        yield x, g * mask

    out._backward = _backward
    return out


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # Split by sign so neither branch overflows.
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor._result(s, (x,), "sigmoid")

    def _backward(g: np.ndarray):
        yield x, g * s * (1.0 - s)

    out._backward = _backward
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor._result(t, (x,), "tanh")

    def _backward(g: np.ndarray):
        yield x, g * (1.0 - t * t)

    out._backward = _backward
    return out


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._result(p, (x,), "softmax")

    def _backward(g: np.ndarray):
        inner = (g * p).sum(axis=axis, keepdims=True)
        yield x, p * (g - inner)

    out._backward = _backward
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    res = z - lse
    out = Tensor._result(res, (x,), "log_softmax")

    def _backward(g: np.ndarray):
        p = np.exp(res)
        yield x, g - p * g.sum(axis=axis, keepdims=True)

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# Reductions and shape manipulation

def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    if axis is None:
        out = Tensor._result(np.array(x.data.sum()), (x,), "sum")

        def _backward(g: np.ndarray):
            yield x, np.full(x.shape, g.item())
    else:
        axis = _check_axis(x, axis)
        out = Tensor._result(x.data.sum(axis=axis), (x,), "sum")

        def _backward(g: np.ndarray):
            yield x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()

    out._backward = _backward
    return out


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[_check_axis(x, axis)]
    s = sum(x, axis)
    res = s.data / n
    out = Tensor._result(res, (s,), "mean")

    def _backward(g: np.ndarray):
        yield s, g / n

    out._backward = _backward
    return out


def max_index(x, axis: int = -1) -> np.ndarray:
    """Index of the largest entry along ``axis``; ties go to the lowest index.

    Not differentiable: returns a plain integer array.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if not -arr.ndim <= axis < arr.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {arr.shape}")
    return np.argmax(arr, axis=axis)


def reduce(kind: str, x: Tensor, axis: int | None = None):
    if kind == "sum":
        return sum(x, axis)
    if kind == "mean":
        return mean(x, axis)
    if kind == "max_index":
        return max_index(x, -1 if axis is None else axis)
    raise ValueError(f"unknown reduction {kind!r}")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ref = tensors[0]
    axis = _check_axis(ref, axis)
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise DimensionError(
                f"concat shapes incompatible on axis {axis}: {[t.shape for t in tensors]}"
            )
    res = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor._result(res, tensors, "concat")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward(g: np.ndarray):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            yield t, g[tuple(sl)]

    out._backward = _backward
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}")
    out = Tensor._result(x.data.reshape(shape), (x,), "reshape")

    def _backward(g: np.ndarray):
        yield x, g.reshape(x.shape)

    out._backward = _backward
    return out


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``index`` along axis 0."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise DimensionError(f"row index out of range for shape {x.shape}")
    out = Tensor._result(x.data[idx], (x,), "take_rows")

    def _backward(g: np.ndarray):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        yield x, full

    out._backward = _backward
    return out


def column(x: Tensor, j: int) -> Tensor:
    """Column ``j`` of an (n, d) tensor as an (n,) tensor."""
    if x.ndim != 2 or not -x.shape[1] <= j < x.shape[1]:
        raise DimensionError(f"column {j} out of range for shape {x.shape}")
    out = Tensor._result(x.data[:, j], (x,), "column")

    def _backward(g: np.ndarray):
        full = np.zeros_like(x.data)
        full[:, j] = g
        yield x, full

    out._backward = _backward
    return out
