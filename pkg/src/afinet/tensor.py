"""Dense tensors with reverse-mode automatic differentiation.

Everything the network touches (images, feature maps, parameters) lives in
a ``Tensor``: a numpy buffer plus an optional place on the gradient tape.
Ops build a DAG of closures; ``backward`` walks it once in reverse
topological order and accumulates gradients additively into every tensor
that asked for them.

Two precisions are supported: float32 (training) and float64 (used by the
finite-difference gradient checks, where float32 round-off would swamp the
tolerances).
"""

from __future__ import annotations

import contextlib

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeMismatchError(ValueError):
    """Two operands have incompatible shapes; message names both."""

    def __init__(self, what, shape_a, shape_b):
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{what}: shape {self.shape_a} vs {self.shape_b}")


class TapeError(RuntimeError):
    """Backward invoked on a stale or ill-formed graph."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """n-dimensional array, optionally participating in the gradient tape.

    Attributes:
        data: numpy array (float32 or float64).
        grad: accumulated gradient, same shape as data, or None.
        requires_grad: whether backward should deposit a gradient here.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_consumed", "op")

    def __init__(self, data, requires_grad=False, dtype=None,
                 _parents=(), _op="leaf"):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents = _parents
        self._backward_fn = None
        self._consumed = False
        self.op = _op

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad}, op={self.op!r})")

    def item(self):
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- graph bookkeeping -------------------------------------------------

    def _accumulate(self, g):
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or g is self.data else g
        else:
            self.grad = self.grad + g

    def backward(self):
        """Reverse-mode sweep from this (scalar) tensor.

        Raises TapeError for a non-scalar root or if any node in the graph
        already had its backward run (a tape is single-use; re-run the
        forward pass to differentiate again).
        """
        if self.data.size != 1:
            raise TapeError(
                f"backward requires a scalar loss, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        for node in topo:
            if node._backward_fn is not None and node._consumed:
                raise TapeError(
                    "tape already consumed by a previous backward; "
                    "re-run the forward pass")
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is None:
                continue
            node._consumed = True
            if node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_lift(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def permute(self, *axes):
        return permute(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _lift(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, op, backward_fn):
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (),
                 _op=op)
    if req:
        out.requires_grad = True
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise / structural ops ------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError("add operands not broadcastable",
                                 a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), "add", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError("mul operands not broadcastable",
                                 a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), "mul", bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return _make(a.data * s, (a,), "scale", bw)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), "reshape", bw)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), "permute", bw)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    """View of channels [start, stop) along axis 1 of an [N,C,...] tensor."""

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            a._accumulate(full)

    return _make(a.data[:, start:stop].copy(), (a,), "slice_channels", bw)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), "sum", bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    out = tsum(a, axis=axis, keepdims=keepdims)
    return scale(out, 1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for 2-D operands, or batched [N,I,C] @ [C,K]."""
    if a.data.ndim not in (2, 3) or b.data.ndim != 2:
        raise ShapeMismatchError("matmul expects 2D/3D @ 2D", a.shape, b.shape)
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError("matmul inner dimensions", a.shape, b.shape)
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            if a.data.ndim == 2:
                b._accumulate(a.data.T @ g)
            else:
                ga = np.tensordot(a.data, g, axes=([0, 1], [0, 1]))
                b._accumulate(ga)

    return _make(data, (a, b), "matmul", bw)


def concat(tensors, axis: int = 1) -> Tensor:
    """Concatenate tensors along an existing axis."""
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(p)

    return _make(data, tuple(tensors), "concat", bw)


def concat_channels(tensors) -> Tensor:
    return concat(tensors, axis=1)
