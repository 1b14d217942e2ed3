"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure that pushes ``out.grad`` back into the inputs. ``backward``
walks the recorded graph in reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False, name: str = "") -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad, name=name)

    @classmethod
    def ones(cls, *shape: int, requires_grad: bool = False, name: str = "") -> "Tensor":
        return cls(np.ones(shape), requires_grad=requires_grad, name=name)

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
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar ---------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], op: str,
                backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap ``data`` as an op output, wiring ``backward_fn`` if any parent needs grads."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = ""
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# -- broadcasting ---------------------------------------------------------------
def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Trailing-dimension broadcast; raises ShapeError naming both shapes."""
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        da = a[-i] if i <= len(a) else 1
        db = b[-i] if i <= len(b) else 1
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible")
        out.append(max(da, db) if min(da, db) != 0 else 0)
    return tuple(reversed(out))


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of trailing-dimension broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)

    def _bw(g):
        if a.requires_grad:
            a.accumulate(unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(unbroadcast(g, b.shape))

    return make_result(a.data + b.data, (a, b), "add", _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)

    def _bw(g):
        if a.requires_grad:
            a.accumulate(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(unbroadcast(g * a.data, b.shape))

    return make_result(a.data * b.data, (a, b), "mul", _bw)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), "neg", lambda g: a.accumulate(-g))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0.0), (a,), "relu",
                       lambda g: a.accumulate(g * mask))


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return make_result(out, (a,), "sigmoid", lambda g: a.accumulate(g * out * (1.0 - out)))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def elementwise(op_kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name: ``add`` and ``mul`` are binary, ``relu``/``sigmoid`` unary."""
    if op_kind in ("add", "mul"):
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return (add if op_kind == "add" else mul)(a, b)
    if op_kind in ("relu", "sigmoid"):
        return (relu if op_kind == "relu" else sigmoid)(a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# -- linear algebra and reshaping -------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def _bw(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return make_result(a.data @ b.data, (a, b), "matmul", _bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return make_result(a.data.reshape(shape), (a,), "reshape",
                       lambda g: a.accumulate(g.reshape(src)))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,), "permute",
                       lambda g: a.accumulate(np.transpose(g, inv)))


def tsum(a: Tensor) -> Tensor:
    return make_result(np.array(a.data.sum()), (a,), "sum",
                       lambda g: a.accumulate(np.broadcast_to(g, a.shape)))


def mean(a: Tensor) -> Tensor:
    n = max(a.size, 1)
    return make_result(np.array(a.data.sum() / n), (a,), "mean",
                       lambda g: a.accumulate(np.broadcast_to(g / n, a.shape)))


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather along axis 0 (``a[index]``); duplicate indices accumulate."""
    index = np.asarray(index, dtype=np.int64)

    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a.accumulate(full)

    return make_result(a.data[index], (a,), "take_rows", _bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate(g[tuple(sl)])

    return make_result(np.concatenate([t.data for t in tensors], axis=axis),
                       tuple(tensors), "concat", _bw)


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    if factor == 1:
        return a
    out = a.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def _bw(g):
        *lead, h, w = g.shape
        a.accumulate(g.reshape(*lead, h // factor, factor, w // factor, factor).sum(axis=(-3, -1)))

    return make_result(out, (a,), "upsample", _bw)


# -- graph traversal ---------------------------------------------------------------
def topological_order(root: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``root``, inputs before outputs."""
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Interior gradients are freed after use; leaf gradients accumulate across
    calls until an optimizer zeroes them.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._backward is None:
        loss.accumulate(np.ones_like(loss.data))
        return
    order = topological_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        g, node.grad = node.grad, None
        node._backward(g)
