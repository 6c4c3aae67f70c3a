"""Tensors and a reverse-mode tape.

Ops run eagerly on numpy arrays.  While a :class:`Tape` is active, every op
whose inputs require gradients appends a node ``(output, op tag, parents,
vjp)`` to it.  Nodes are appended in creation order, so the tape is already
topologically sorted and :func:`backward` is a single reverse sweep.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.float32

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """Dense row-major array of reals with optional gradient tracking.

    Storage is float32 unless a dtype is requested explicitly; float64
    tensors are used for shadow evaluation in gradient checks and every op
    preserves the dtype of its inputs.
    """

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.ascontiguousarray(data, dtype=dtype)
        else:
            arr = np.ascontiguousarray(data)
            if arr.dtype not in (np.float32, np.float64) or not isinstance(data, np.ndarray):
                arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype or DEFAULT_DTYPE)


@dataclass
class Node:
    out: Tensor
    op: str
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops; use as a context manager."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None


def record(op: str, out: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``out`` as a tensor and log it on the active tape when needed."""
    result = Tensor(out)
    tape = Tape.current()
    if tape is not None and any(p.requires_grad for p in parents):
        result.requires_grad = True
        tape.nodes.append(Node(result, op, tuple(parents), vjp))
        tape._produced.add(id(result))
    return result


def backward(tape: Tape, loss: Tensor, params):
    """Reverse sweep over ``tape`` from the scalar ``loss``.

    ``params`` may be a mapping of name to tensor or a sequence of tensors;
    the result has the same structure and holds one gradient array per
    parameter, shaped like the parameter.  Parameters that do not influence
    the loss get zeros.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    def grad_of(p: Tensor) -> np.ndarray:
        g = grads.get(id(p))
        if g is None:
            return np.zeros_like(p.data)
        return np.asarray(g, dtype=p.dtype).reshape(p.shape)

    if isinstance(params, Mapping):
        return {name: grad_of(p) for name, p in params.items()}
    return [grad_of(p) for p in params]


# elementwise and structural basics ---------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return record("add", out, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return record("mul", out, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.dtype.type(c)
    return record("scale", out, (a,), lambda g: (g * g.dtype.type(c),))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    return record("sum", out, (a,), lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=a.dtype)
    return record("mean", out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def split(a: Tensor, axis: int) -> list[Tensor]:
    """Split into unit slices along ``axis`` (kept as a size-1 axis)."""
    n = a.shape[axis]
    parts = []
    for i in range(n):
        index = [slice(None)] * a.data.ndim
        index[axis] = slice(i, i + 1)
        index = tuple(index)

        def vjp(g, index=index):
            full = np.zeros_like(a.data)
            full[index] = g
            return (full,)

        parts.append(record("split", a.data[index].copy(), (a,), vjp))
    return parts


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return record("concat", out, parts, lambda g: np.split(g, sizes, axis=axis))
