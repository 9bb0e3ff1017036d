"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every op builds its output eagerly and, when gradient recording is on and at
least one input requires a gradient, stores a closure that maps the output
gradient to input gradients. ``backward`` walks the recorded tape once in
reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when an op receives inputs with incompatible shapes."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar --------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded from ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)), "div")


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("minimum", a.data, b.data)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)), "minimum")


def maximum(a, b) -> Tensor:
    """Elementwise maximum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("maximum", a.data, b.data)
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)), "maximum")


def where(cond, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (unbroadcast(g * cond, a.shape), unbroadcast(g * ~cond, b.shape)), "where")


# -- elementwise unary ----------------------------------------------------
def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    from scipy.special import erf

    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


def clip(a, lo, hi) -> Tensor:
    """Clamp to ``[lo, hi]``; bounds are constants (arrays or scalars)."""
    a = as_tensor(a)
    lo = lo.data if isinstance(lo, Tensor) else lo
    hi = hi.data if isinstance(hi, Tensor) else hi
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (unbroadcast(g * inside, a.shape),), "clip")


def scale_grad(a, scale: float) -> Tensor:
    """Identity in the forward pass; multiplies the incoming gradient by ``scale``."""
    a = as_tensor(a)
    return _make(a.data, (a,), lambda g: (g * scale,), "scale_grad")


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# -- reductions and shape -------------------------------------------------
def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[i] for i in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), bw, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw, "getitem")


def take_rows(a, index: np.ndarray) -> Tensor:
    """Gather along axis 0 with an integer index array of any shape."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    rows = a.shape[0]
    rest = a.shape[1:]

    def bw(g):
        flat = g.reshape((-1,) + rest)
        full = np.zeros((rows,) + rest)
        np.add.at(full, index.reshape(-1), flat)
        return (full,)

    return _make(a.data[index], (a,), bw, "take_rows")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in ts]}") from None
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _make(out, ts, bw, "stack")


# -- linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


# -- normalised exponentials ---------------------------------------------
def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


# -- backward pass --------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def _propagate(loss: Tensor) -> dict[int, np.ndarray]:
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if not loss.requires_grad:
        return grads
    for node in reversed(_topo_order(loss)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64, copy=True)
        if node._parents:
            del grads[id(node)]
    return grads


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    grads = _propagate(loss)
    for node in _topo_order(loss) if loss.requires_grad else []:
        if node._parents:
            continue
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` for each of ``params``; unreachable ones are zero."""
    grads = _propagate(loss)
    return [grads.get(id(p), np.zeros_like(p.data)).reshape(p.shape) for p in params]
