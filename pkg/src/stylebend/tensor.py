"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op records its parents and a backward closure on the
output tensor; :meth:`Tensor.backward` walks that graph in reverse
topological order and then releases it, so each forward pass builds a fresh
tape.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_default_dtype: type = np.float32
_grad_enabled: bool = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class TapeError(RuntimeError):
    """backward() called without a usable recorded graph."""


def get_default_dtype() -> type:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default element type (e.g. float64 for checks)."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


_CONSUMED = "<consumed>"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        _check_finite(arr, "tensor construction")
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op: Optional[str] = None

    # -- construction helpers -------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                 backward: Callable, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        else:
            out._parents = ()
            out._backward = None
            out._op = None
        return out

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=_default_dtype), requires_grad)

    # -- basic properties -----------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

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
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward ---------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        ``self`` must be a scalar unless ``grad`` is supplied.  The recorded
        graph is released afterwards; a second call raises :class:`TapeError`.
        """
        if self._op == _CONSUMED:
            raise TapeError("graph already consumed by a previous backward()")
        if self._backward is None:
            raise TapeError("backward() on a tensor with no recorded graph")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = self._topo_order()
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node.requires_grad and g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._op = _CONSUMED

    def _topo_order(self) -> list:
        order: list = []
        seen: set = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        order.reverse()
        return order

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return scalar_mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes or None)
    def relu(self): return relu(self)
    def sigmoid(self): return sigmoid(self)
    def tanh(self): return tanh(self)
    def sqrt(self): return sqrt(self)
    def abs(self): return abs_(self)
    def exp(self): return exp(self)
    def log(self): return log(self)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- broadcasting ---------------------------------------------------------

def _channel_view(small: tuple, big: tuple) -> Optional[tuple]:
    """Shape that places a [C] or [B,C] operand on the channel axis of a map.

    A rank-1 vector meets a [B,C,H,W] map as [1,C,1,1] (or a [C,H,W] map as
    [C,1,1]); a rank-2 [B,C] operand meets [B,C,H,W] as [B,C,1,1].
    """
    if len(big) == 4 and len(small) == 1 and small[0] in (1, big[1]):
        return (1, small[0], 1, 1)
    if len(big) == 4 and len(small) == 2 and small[1] in (1, big[1]) and small[0] in (1, big[0]):
        return small + (1, 1)
    if len(big) == 3 and len(small) == 1 and small[0] in (1, big[0]):
        return (small[0], 1, 1)
    return None


def _aligned(a: np.ndarray, b: np.ndarray) -> tuple:
    sa, sb = a.shape, b.shape
    if sa != sb and len(sa) != len(sb) and min(len(sa), len(sb)) > 0:
        if len(sa) < len(sb):
            view = _channel_view(sa, sb)
            if view is not None:
                a = a.reshape(view)
        else:
            view = _channel_view(sb, sa)
            if view is not None:
                b = b.reshape(view)
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {sa} and {sb} are not broadcastable") from None
    return a, b, out_shape


def _unbroadcast(grad: np.ndarray, shape: tuple, orig: tuple) -> np.ndarray:
    if grad.shape != shape:
        lead = grad.ndim - len(shape)
        if lead:
            grad = grad.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
        if axes:
            grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(orig)


def _binary(a: ArrayLike, b: ArrayLike, fwd, bwd, op: str) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd, _ = _aligned(a.data, b.data)
    out = fwd(ad, bd)

    def backward(g):
        ga, gb = bwd(g, ad, bd, out)
        return (
            None if ga is None else _unbroadcast(ga, ad.shape, a.shape),
            None if gb is None else _unbroadcast(gb, bd.shape, b.shape),
        )

    return Tensor._from_op(out, (a, b), backward, op)


# -- elementwise ops ---------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y, o: (g, g), "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y, o: (g, -g), "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: (g * y, g * x), "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    return _binary(a, b, np.divide, lambda g, x, y, o: (g / y, -g * o / y), "div")


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,), "scalar_mul")


def power(x: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    out = x.data ** e
    return Tensor._from_op(out, (x,), lambda g: (g * e * x.data ** (e - 1),), "power")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


# -- reductions and shape ops --------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), x.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    if count == 0:
        raise ShapeError("mean over an empty extent")
    out = np.mean(x.data, axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    scale = x.data.dtype.type(1.0 / count)

    def backward(g):
        return (np.broadcast_to(g.reshape(kept) * scale, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    if isinstance(shape, int):
        shape = (shape,)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    out = np.transpose(x.data, axes)
    return Tensor._from_op(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(out), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return Tensor._from_op(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")
