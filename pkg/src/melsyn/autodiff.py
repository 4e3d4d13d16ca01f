"""Reverse-mode automatic differentiation over numpy arrays.

Every array value in the project is carried by :class:`Tensor`, a thin
wrapper around a row-major numpy array (float32 or float64) that records
the operations applied to it. Calling ``backward()`` on a scalar result
walks the recorded graph in reverse topological order and accumulates
gradients into every tensor created with ``requires_grad=True``.

The op set is deliberately small: exactly what a desk-scale UNet with
attention needs. No views are created; every op returns a fresh array,
so tensors are immutable values once constructed.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / FD probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64 if arr.dtype == np.int64 else np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    """A dense float32/float64 array plus an optional gradient tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = parents if needs else ()
        out._backward = backward if needs else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- backward pass ---------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar. Seeds d(self)/d(self) = 1."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _lift(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over broadcast dimensions back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# -- elementwise ops ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._from_op(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._from_op(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._from_op(out, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)

    return Tensor._from_op(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return Tensor._from_op(out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g / (2.0 * out))

    return Tensor._from_op(out, (a,), backward)


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def backward(g):
        a._accumulate(2.0 * g * a.data)

    return Tensor._from_op(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # Stable in both tails: exp of a non-positive argument only.
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype)

    def backward(g):
        a._accumulate(g * out * (1.0 - out))

    return Tensor._from_op(out, (a,), backward)


def silu(a: Tensor) -> Tensor:
    return mul(a, sigmoid(a))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-stable softmax: the running max is treated as a constant shift."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a._accumulate((g - dot) * out)

    return Tensor._from_op(out, (a,), backward)


# -- reductions / shaping ----------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=a.dtype)

    def backward(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % a.data.ndim for ax in axes)
            shape = tuple(1 if i in axes else d for i, d in enumerate(a.shape))
            gg = gg.reshape(shape)
        a._accumulate(np.broadcast_to(gg, a.shape).astype(a.dtype))

    return Tensor._from_op(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax % a.data.ndim]
    return mul(tsum(a, axis=axis, keepdims=keepdims), _lift(1.0 / count, a.dtype))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor._from_op(np.ascontiguousarray(out), (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.ascontiguousarray(a.data.transpose(axes))
    if axes is None:
        inverse = None
    else:
        inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(np.ascontiguousarray(g.transpose(inverse)))

    return Tensor._from_op(out, (a,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(np.ascontiguousarray(g[tuple(idx)]))

    return Tensor._from_op(out, tuple(tensors), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._from_op(out, (a, b), backward)


# -- spatial ops (single image, CHW layout) ------------------------------------


def _im2col3(xp: np.ndarray, height: int, width: int) -> np.ndarray:
    """Gather 3x3 neighborhoods from a padded (C, H+2, W+2) array."""
    channels = xp.shape[0]
    cols = np.empty((channels, 9, height, width), dtype=xp.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[:, k] = xp[:, di:di + height, dj:dj + width]
            k += 1
    return cols.reshape(channels * 9, height * width).T


def _col2im3(dcols: np.ndarray, channels: int, height: int, width: int) -> np.ndarray:
    d = dcols.T.reshape(channels, 9, height, width)
    xp = np.zeros((channels, height + 2, width + 2), dtype=dcols.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            xp[:, di:di + height, dj:dj + width] += d[:, k]
            k += 1
    return xp[:, 1:1 + height, 1:1 + width]


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 3x3 convolution: (C,H,W) x (Cout,C,3,3) -> (Cout,H,W)."""
    c, h, w = x.shape
    cout = weight.shape[0]
    if weight.shape != (cout, c, 3, 3):
        raise ValueError(f"conv3x3 weight shape {weight.shape} does not match input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    cols = _im2col3(xp, h, w)                       # (H*W, C*9)
    wmat = weight.data.reshape(cout, c * 9)
    out_mat = cols @ wmat.T + bias.data             # (H*W, Cout)
    out = np.ascontiguousarray(out_mat.T.reshape(cout, h, w))

    def backward(g):
        g_mat = g.reshape(cout, h * w).T            # (H*W, Cout)
        if weight.requires_grad:
            weight._accumulate((g_mat.T @ cols).reshape(weight.shape))
        if bias.requires_grad:
            bias._accumulate(g_mat.sum(axis=0))
        if x.requires_grad:
            dcols = g_mat @ wmat                    # (H*W, C*9)
            x._accumulate(_col2im3(dcols, c, h, w))

    return Tensor._from_op(out, (x, weight, bias), backward)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 on (C,H,W); H and W must be even."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {x.shape}")
    r = x.data.reshape(c, h // 2, 2, w // 2, 2)
    out = r.mean(axis=(2, 4))

    def backward(g):
        gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        x._accumulate(gx.astype(x.dtype))

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling on (C,H,W)."""
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        c, h2, w2 = g.shape
        gx = g.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4))
        x._accumulate(gx.astype(x.dtype))

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward)
