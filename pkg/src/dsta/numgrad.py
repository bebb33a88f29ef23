"""Small reverse-mode differentiation core over numpy arrays.

Operations are recorded on the active :class:`Graph` (a tape).  Because nodes
are appended in creation order, the tape itself is a valid topological order
and ``backward`` simply walks it in reverse.  When no graph is active nothing
is recorded, which is how inference runs.

Shapes follow numpy semantics.  Broadcasting is supported only as far as
``matmul`` stacking and ``add``/``mul`` with leading or size-1 axes need it.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf from its inputs."""


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    """Input outside an operation's mathematical domain (e.g. log of 0)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all of these go through the recorded functions below
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


class Graph:
    """Tape of recorded operations for one forward pass.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are appended to ``nodes``.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._prev: Graph | None = None

    def __enter__(self) -> "Graph":
        self._prev = getattr(_state, "graph", None)
        _state.graph = self
        return self

    def __exit__(self, *exc) -> None:
        _state.graph = self._prev

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(.) to every leaf with ``requires_grad``.

        Leaf gradients are *added* to ``Tensor.grad``; call ``zero_grad`` on
        parameters between optimizer steps.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        # buffers we allocated ourselves and may therefore update in place
        owned: set[int] = set()

        def accumulate(t: Tensor, g: np.ndarray, key=None) -> None:
            if not t.requires_grad:
                return
            if t._backward is None:
                # leaf: accumulate straight into .grad
                if key is not None:
                    full = np.zeros_like(t.data)
                    full[key] = g
                    g = full
                elif g.shape != t.data.shape:
                    g = _unbroadcast(g, t.data.shape)
                t.grad = g.copy() if t.grad is None else t.grad + g
                return
            k = id(t)
            if key is not None:
                buf = grads.get(k)
                if buf is None:
                    buf = grads[k] = np.zeros_like(t.data)
                elif k not in owned:
                    buf = grads[k] = buf.copy()
                owned.add(k)
                buf[key] += g
                return
            if g.shape != t.data.shape:
                g = _unbroadcast(g, t.data.shape)
            prev = grads.get(k)
            if prev is None:
                grads[k] = g
            else:
                grads[k] = prev + g
                owned.add(k)

        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node._backward(g, accumulate)
        if id(loss) in grads and loss._backward is None:
            accumulate(loss, grads.pop(id(loss)))


def current_graph() -> Graph | None:
    return getattr(_state, "graph", None)


def backward(loss: Tensor) -> None:
    """Run backward on the active graph."""
    g = current_graph()
    if g is None:
        raise RuntimeError("no active Graph; wrap the forward pass in `with Graph():`")
    g.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


def _make(out: np.ndarray, parents: Sequence[Tensor], fn, op: str) -> Tensor:
    _check(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    graph = getattr(_state, "graph", None)
    if graph is not None and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = fn
        graph.nodes.append(t)
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    if A.ndim == 0 or B.ndim == 0:
        raise ShapeError("matmul needs at least 1-d operands")
    if A.shape[-1] != B.shape[0 if B.ndim == 1 else -2]:
        raise ShapeError(f"matmul inner dimensions differ: {A.shape} @ {B.shape}")
    out = A @ B

    def bw(g, acc):
        # promote vectors to matrices so one rule covers every case
        A2 = A[None, :] if A.ndim == 1 else A
        B2 = B[:, None] if B.ndim == 1 else B
        g2 = g
        if A.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if B.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        if a.requires_grad:
            ga = g2 @ np.swapaxes(B2, -1, -2)
            if A.ndim == 1:
                ga = ga[..., 0, :]
            acc(a, ga)
        if b.requires_grad:
            gb = np.swapaxes(A2, -1, -2) @ g2
            if B.ndim == 1:
                gb = gb[..., 0]
            acc(b, gb)

    return _make(out, (a, b), bw, "matmul")


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = _as_tensor(x)
    out = np.swapaxes(x.data, -1, -2)

    def bw(g, acc):
        acc(x, np.swapaxes(g, -1, -2))

    return _make(out, (x,), bw, "transpose")


def rowwise_inner(a, b, axis: int = -1) -> Tensor:
    """out[..., i] = sum_j a[..., i, j] * b[..., i, j] (reduction over ``axis``)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"rowwise_inner needs equal shapes, got {a.shape} and {b.shape}")
    A, B = a.data, b.data
    out = (A * B).sum(axis=axis)

    def bw(g, acc):
        g = np.expand_dims(g, axis)
        if a.requires_grad:
            acc(a, g * B)
        if b.requires_grad:
            acc(b, g * A)

    return _make(out, (a, b), bw, "rowwise_inner")


# ---------------------------------------------------------------------------
# elementwise


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "add")

    def bw(g, acc):
        acc(a, g)
        acc(b, g)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")

    def bw(g, acc):
        acc(a, g)
        acc(b, -g)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    _check_broadcast(A, B, "mul")

    def bw(g, acc):
        if a.requires_grad:
            acc(a, g * B)
        if b.requires_grad:
            acc(b, g * A)

    return _make(A * B, (a, b), bw, "mul")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)

    def bw(g, acc):
        acc(x, g * (1.0 - y * y))

    return _make(y, (x,), bw, "tanh")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    X = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(X))
    y = np.where(X >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g, acc):
        acc(x, g * y * (1.0 - y))

    return _make(y, (x,), bw, "sigmoid")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)

    def bw(g, acc):
        acc(x, g * y)

    return _make(y, (x,), bw, "exp")


def log(x) -> Tensor:
    x = _as_tensor(x)
    X = x.data
    if np.any(X <= 0):
        raise DomainError("log of a non-positive value")

    def bw(g, acc):
        acc(x, g / X)

    return _make(np.log(X), (x,), bw, "log")


def maximum(x, c: float) -> Tensor:
    """max(x, c) against a scalar; the gradient goes to x where x > c."""
    x = _as_tensor(x)
    mask = x.data > c

    def bw(g, acc):
        acc(x, g * mask)

    return _make(np.where(mask, x.data, c), (x,), bw, "maximum")


def clip(x, lo: float, hi: float) -> Tensor:
    x = _as_tensor(x)
    X = x.data
    mask = (X >= lo) & (X <= hi)

    def bw(g, acc):
        acc(x, g * mask)

    return _make(np.clip(X, lo, hi), (x,), bw, "clip")


# ---------------------------------------------------------------------------
# reductions and normalisation


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    X = x.data
    z = X - X.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g, acc):
        acc(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), bw, "softmax")


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    shape = x.shape

    def bw(g, acc):
        if axis is None:
            acc(x, np.broadcast_to(g, shape))
        else:
            acc(x, np.broadcast_to(np.expand_dims(g, axis), shape))

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), bw, "sum")


def mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# structural


def concat(a, b) -> Tensor:
    """Join two tensors along the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat: rank or leading shape mismatch {a.shape} vs {b.shape}")
    k = a.shape[-1]

    def bw(g, acc):
        acc(a, g[..., :k])
        acc(b, g[..., k:])

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), bw, "concat")


def stack(xs: Iterable, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)

    def bw(g, acc):
        for i, x in enumerate(xs):
            if x.requires_grad:
                acc(x, np.take(g, i, axis=axis))

    return _make(out, xs, bw, "stack")


def index(x, key) -> Tensor:
    """Basic (non-fancy) indexing; the gradient is scattered back into place."""
    x = _as_tensor(x)

    def bw(g, acc):
        acc(x, g, key)

    return _make(x.data[key], (x,), bw, "index")


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape

    def bw(g, acc):
        acc(x, g.reshape(old))

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def expand_dims(x, axis: int) -> Tensor:
    x = _as_tensor(x)
    return reshape(x, np.expand_dims(x.data, axis).shape)
