"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive returns a :class:`Tensor` that remembers its inputs and a
closure pushing the output gradient back to them.  The recorded graph is the
tape: :func:`backward` orders it topologically from a scalar root and visits
each node once.  Only :class:`Parameter` leaves keep gradients between calls.
"""

from __future__ import annotations

import contextlib
import threading
from collections.abc import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import NumericalError, ShapeError, UsageError

__all__ = [
    "Tensor",
    "Parameter",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "log_sum_exp",
    "tsum",
    "mean",
    "concat",
    "stack",
    "reshape",
    "slice_",
    "lookup",
    "take",
    "primitive",
    "no_grad",
    "backward",
    "gradient_check",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_owns_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._owns_grad = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """Trainable leaf; its gradient persists and accumulates until :meth:`zero_grad`."""

    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self._owns_grad = True

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
        t._owns_grad = False
    elif t._owns_grad:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._owns_grad = True


_state = threading.local()


def _is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording the graph (inference); per thread."""
    previous = _is_recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = previous


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str, fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced a non-finite value")
    out = Tensor(data)
    if any(p.requires_grad for p in parents) and _is_recording():
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def primitive(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    """Register a fused operation: ``backward_fn(g)`` must push ``g`` into ``parents``.

    Use :func:`accumulate` inside ``backward_fn``.
    """
    return _result(np.asarray(data, dtype=np.float64), tuple(parents), op, backward_fn)


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` to the gradient of ``t`` (no-op for constants)."""
    _accum(t, g)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "add")

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", back)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "sub")

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), "sub", back)


def neg(a) -> Tensor:
    a = constant(a)
    return _result(-a.data, (a,), "neg", lambda g: _accum(a, -g))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "mul")

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", back)


def matmul(a, b) -> Tensor:
    """Matrix product of 1-D or 2-D operands."""
    a, b = constant(a), constant(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def back(g):
        if a.requires_grad:
            if b.data.ndim == 1:
                ga = np.multiply.outer(g, b.data)
            else:
                ga = g @ b.data.T
            _accum(a, ga)
        if b.requires_grad:
            if a.data.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            elif b.data.ndim == 1:
                gb = a.data.T @ g
            else:
                gb = a.data.T @ g
            _accum(b, gb)

    return _result(a.data @ b.data, (a, b), "matmul", back)


def tanh(a) -> Tensor:
    a = constant(a)
    y = np.tanh(a.data)
    return _result(y, (a,), "tanh", lambda g: _accum(a, g * (1.0 - y * y)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a) -> Tensor:
    a = constant(a)
    y = _sigmoid(a.data)
    return _result(y, (a,), "sigmoid", lambda g: _accum(a, g * y * (1.0 - y)))


def exp(a) -> Tensor:
    a = constant(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _result(y, (a,), "exp", lambda g: _accum(a, g * y))


def log(a) -> Tensor:
    a = constant(a)
    if np.any(a.data <= 0):
        raise NumericalError("log of a non-positive value")
    return _result(np.log(a.data), (a,), "log", lambda g: _accum(a, g / a.data))


def log_sum_exp(a, axis: int = -1) -> Tensor:
    """``log(sum(exp(a)))`` along ``axis``, stabilised by subtracting the max."""
    a = constant(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(total), axis=axis)
    soft = shifted / total

    def back(g):
        _accum(a, np.expand_dims(g, axis) * soft)

    return _result(out, (a,), "log_sum_exp", back)


def tsum(a, axis: int | None = None) -> Tensor:
    a = constant(a)

    def back(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), "sum", back)


def mean(a) -> Tensor:
    a = constant(a)
    n = a.size
    return _result(np.asarray(a.data.mean()), (a,), "mean", lambda g: _accum(a, np.full(a.shape, g / n)))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [constant(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                _accum(t, np.take(g, np.arange(lo, hi), axis=axis))

    return _result(data, tuple(tensors), "concat", back)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    tensors = [constant(t) for t in tensors]
    try:
        data = np.stack([t.data for t in tensors])
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None

    def back(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accum(t, g[i])

    return _result(data, tuple(tensors), "stack", back)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = constant(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _result(data, (a,), "reshape", lambda g: _accum(a, g.reshape(a.shape)))


def slice_(a, idx) -> Tensor:
    """Basic (view) indexing; gradients scatter in place into the parent."""
    a = constant(a)
    try:
        data = a.data[idx]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None

    def back(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
            a._owns_grad = True
        elif not a._owns_grad:
            a.grad = a.grad.copy()
            a._owns_grad = True
        a.grad[idx] += g

    return _result(np.array(data), (a,), "slice", back)


def take(a, index) -> Tensor:
    """Advanced-index gather ``a[index]``; repeated indices accumulate gradient."""
    a = constant(a)
    try:
        data = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"take: {exc}") from None

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accum(a, full)

    return _result(np.array(data), (a,), "take", back)


def lookup(table, ids) -> Tensor:
    """Row gather ``table[ids]`` for an integer id array."""
    table = constant(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("lookup needs a 2-D table")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"lookup: ids outside [0, {table.shape[0]})")
    return take(table, ids)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
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
    """Accumulate d(loss)/d(param) into every reachable :class:`Parameter`."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if not isinstance(node, Parameter):
                node.grad = None


def gradient_check(
    fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    epsilon: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative gap between backprop and central finite differences.

    The relative error of a coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.  With
    ``max_coords`` set, that many coordinates per parameter are sampled.
    """
    params = list(params)
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    backward(fn())
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = fn().item()
            flat[i] = orig - epsilon
            down = fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
