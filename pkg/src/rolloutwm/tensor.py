"""Dense arrays with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy buffer (float32 by default). Every op whose
inputs require gradients records a node holding its parents and a backward
closure; :func:`backward` replays those nodes in reverse creation order.
A :class:`Tape` is an optional recorder that collects the nodes created while
it is active, which is convenient for inspection and for scoping one
training step.

Numerics follow a few fixed rules: layer normalization of a zero-variance
vector returns zeros (epsilon 1e-5), no op mutates its inputs, and the
64-bit replay mode (:func:`precision`) exists for gradient checking only.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation

_state = threading.local()
_counter = itertools.count()

LAYERNORM_EPS = 1e-5


def default_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def debug_enabled() -> bool:
    return getattr(_state, "debug", False)


def _tapes() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors with ``dtype`` (use ``np.float64`` for gradient replay)."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def debug_mode():
    """Check every op result for NaN/Inf."""
    prev = debug_enabled()
    _state.debug = True
    try:
        yield
    finally:
        _state.debug = prev


class Tape:
    """Ordered record of the ops created while the tape is active."""

    def __init__(self) -> None:
        self.records: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes().remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: "Tensor") -> None:
        if not self.records:
            raise ContractViolation("backward on an empty tape")
        backward(loss)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=default_dtype())
        if not np.isfinite(arr).all():
            raise ContractViolation("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_counter)

    # construction of op results, skipping the creation-time finiteness scan
    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward_fn: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._seq = next(_counter)
        if debug_enabled() and not np.isfinite(data).all():
            raise FloatingPointError("op produced NaN or Inf")
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
            for tape in _tapes():
                tape.records.append(out)
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return detach(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def _not_scalar(t: Tensor):
    raise ContractViolation(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out._seq = next(_counter)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))

    def bw(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return Tensor._result(x.data * sig, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; a 2-D right operand is shared across a's leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if b.ndim == 2:

        def bw(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

    else:
        if a.shape[:-2] != b.shape[:-2]:
            raise ContractViolation(f"matmul: batch mismatch {a.shape} vs {b.shape}")

        def bw(g):
            ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
            return ga, gb

    return Tensor._result(a.data @ b.data, (a, b), bw)


def layernorm(x: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis, no affine part."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return Tensor._result(y, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._result(s, (x,), bw)


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.data.dtype),)

    return Tensor._result(np.asarray(out), (x,), bw)


def sum_of_squares(x: Tensor) -> Tensor:
    return Tensor._result(np.asarray((x.data * x.data).sum()), (x,), lambda g: (2.0 * g * x.data,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return Tensor._result(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    basic = _is_basic(index)

    def bw(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return Tensor._result(x.data[index], (x,), bw)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractViolation("concat of nothing")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            n != m for i, (n, m) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ContractViolation(f"concat: shape mismatch {ref} vs {t.shape}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._result(
        np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw
    )


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractViolation("backward: nothing was recorded for this loss")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        n = stack.pop()
        if id(n) in nodes:
            continue
        nodes[id(n)] = n
        stack.extend(p for p in n._parents if p.requires_grad)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for n in sorted(nodes.values(), key=lambda t: t._seq, reverse=True):
        g = grads.pop(id(n), None)
        if g is None:
            continue
        if n._backward is None:
            g = g.astype(n.data.dtype, copy=False)
            n.grad = g.copy() if n.grad is None else n.grad + g
            continue
        for p, pg in zip(n._parents, n._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = grads[k] + pg if k in grads else pg


def sinusoidal_embedding(x, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Interleaved [sin, cos] features at geometric frequencies.

    Output shape is ``x.shape + (dim,)``; frequency k is ``max_period**(-k/(dim/2))``
    so the first pair runs at frequency 1.
    """
    if dim < 2 or dim % 2:
        raise ContractViolation(f"sinusoidal_embedding needs an even dim >= 2, got {dim}")
    x = np.asarray(x, dtype=np.float64)
    half = dim // 2
    freqs = max_period ** (-np.arange(half) / half)
    arg = x[..., None] * freqs
    out = np.empty(x.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out.astype(default_dtype())
