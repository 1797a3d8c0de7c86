"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive returns a new ``Tensor`` remembering its parents and a
vector-Jacobian closure.  ``backward`` orders the graph topologically and
runs the closures once each in reverse order; only leaves with
``requires_grad`` keep their gradient, and they accumulate across calls.
"""

from __future__ import annotations

import contextlib
import itertools
from math import prod
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self.op = op

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        order = topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, n):
        if n != 2:
            raise ValueError("only squaring is supported")
        return square(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents before children (iterative DFS)."""
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), vjp, op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data**2, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    return steep_sigmoid(a, 1.0)


def steep_sigmoid(a, k: float = 5.0) -> Tensor:
    """1 / (1 + exp(-k x)), gradient k y (1 - y)."""
    if not k > 0:
        raise ValueError(f"steepness must be positive, got {k}")
    a = as_tensor(a)
    y = _sigmoid(k * a.data)
    return _make(y, (a,), lambda g: (g * k * y * (1.0 - y),), "steep_sigmoid")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# reductions and shape manipulation


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), vjp, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else prod(np.atleast_1d(np.array(a.shape)[np.atleast_1d(axis)]))
    return tsum(a, axis) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a) -> Tensor:
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), vjp, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


# convolution


def resolve_padding(n: int, k: int, s: int, padding) -> tuple[int, int]:
    """(lo, hi) padding of one spatial dimension."""
    if padding == "valid":
        return 0, 0
    if padding == "same":
        out = -(-n // s)
        total = max((out - 1) * s + k - n, 0)
        return total // 2, total - total // 2
    if isinstance(padding, int):
        return padding, padding
    lo, hi = padding
    return int(lo), int(hi)


def conv_output_size(n: int, k: int, s: int, lo: int, hi: int) -> int:
    return (n + lo + hi - k) // s + 1


def _per_dim(padding, nd):
    if isinstance(padding, (str, int)):
        return [padding] * nd
    per = list(padding)
    if len(per) != nd:
        raise ShapeError(f"padding {padding!r} does not have {nd} entries")
    return per


def _spatial_params(spatial, kernel, stride, padding):
    nd = len(spatial)
    stride = (stride,) * nd if isinstance(stride, int) else tuple(stride)
    pads = [resolve_padding(n, k, s, p) for n, k, s, p in zip(spatial, kernel, stride, _per_dim(padding, nd))]
    return stride, pads


def _im2col(x: np.ndarray, kernel, stride, pads, out):
    nd = len(kernel)
    b, c = x.shape[:2]
    xp = np.pad(x, [(0, 0), (0, 0)] + list(pads)) if any(lo or hi for lo, hi in pads) else x
    win = sliding_window_view(xp, kernel, axis=tuple(range(2, 2 + nd)))
    win = win[(slice(None), slice(None)) + tuple(slice(None, (o - 1) * s + 1, s) for o, s in zip(out, stride))]
    perm = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    return win.transpose(perm).reshape(b * prod(out), c * prod(kernel))


def _col2im(cols: np.ndarray, xshape, kernel, stride, pads, out):
    nd = len(kernel)
    b, c = xshape[:2]
    padded = tuple(n + lo + hi for n, (lo, hi) in zip(xshape[2:], pads))
    xp = np.zeros((b, c) + padded)
    d = cols.reshape((b,) + tuple(out) + (c,) + tuple(kernel))
    d = np.moveaxis(d, 1 + nd, 1)  # (b, c, *out, *kernel)
    for offs in itertools.product(*(range(k) for k in kernel)):
        sl = tuple(slice(o, o + (n - 1) * s + 1, s) for o, n, s in zip(offs, out, stride))
        xp[(slice(None), slice(None)) + sl] += d[(Ellipsis,) + offs]
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, xshape[2:]))
    return xp[(slice(None), slice(None)) + crop]


def conv(x, w, stride=1, padding="valid") -> Tensor:
    """N-d cross-correlation, channels first: x (B, C, *S), w (O, C, *K)."""
    x, w = as_tensor(x), as_tensor(w)
    nd = w.ndim - 2
    if x.ndim != nd + 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv: input {x.shape} does not match weight {w.shape}")
    kernel = w.shape[2:]
    stride, pads = _spatial_params(x.shape[2:], kernel, stride, padding)
    out = tuple(conv_output_size(n, k, s, lo, hi) for n, k, s, (lo, hi) in zip(x.shape[2:], kernel, stride, pads))
    if any(o < 1 for o in out):
        raise ShapeError(f"conv: input {x.shape} too small for kernel {kernel}")
    cols = _im2col(x.data, kernel, stride, pads, out)
    wm = w.data.reshape(w.shape[0], -1)
    y = cols @ wm.T
    b = x.shape[0]
    y = np.moveaxis(y.reshape((b,) + out + (w.shape[0],)), -1, 1)

    def vjp(g):
        gm = np.moveaxis(g, 1, -1).reshape(-1, w.shape[0])
        gx = _col2im(gm @ wm, x.shape, kernel, stride, pads, out) if x.requires_grad else None
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        return gx, gw

    return _make(np.ascontiguousarray(y), (x, w), vjp, "conv")


def conv_transpose(x, w, stride=1, padding="valid", output_size=None) -> Tensor:
    """Adjoint of ``conv`` in its input: x (B, I, *S), w (I, O, *K) -> (B, O, *S')."""
    x, w = as_tensor(x), as_tensor(w)
    nd = w.ndim - 2
    if x.ndim != nd + 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose: input {x.shape} does not match weight {w.shape}")
    kernel = w.shape[2:]
    stride = (stride,) * nd if isinstance(stride, int) else tuple(stride)
    if output_size is None:
        if padding == "same":
            output_size = tuple(n * s for n, s in zip(x.shape[2:], stride))
        else:
            pads0 = [resolve_padding(0, k, s, p) for k, s, p in zip(kernel, stride, _per_dim(padding, nd))]
            output_size = tuple((n - 1) * s + k - lo - hi for n, s, k, (lo, hi) in zip(x.shape[2:], stride, kernel, pads0))
    output_size = tuple(output_size)
    _, pads = _spatial_params(output_size, kernel, stride, padding)
    out = tuple(conv_output_size(n, k, s, lo, hi) for n, k, s, (lo, hi) in zip(output_size, kernel, stride, pads))
    if out != tuple(x.shape[2:]):
        raise ShapeError(f"conv_transpose: output size {output_size} is inconsistent with input {x.shape}")
    b = x.shape[0]
    xm = np.moveaxis(x.data, 1, -1).reshape(-1, w.shape[0])
    wm = w.data.reshape(w.shape[0], -1)
    yshape = (b, w.shape[1]) + output_size
    y = _col2im(xm @ wm, yshape, kernel, stride, pads, out)

    def vjp(g):
        cols = _im2col(g, kernel, stride, pads, out)
        gx = np.moveaxis((cols @ wm.T).reshape((b,) + out + (w.shape[0],)), -1, 1) if x.requires_grad else None
        gw = (xm.T @ cols).reshape(w.shape) if w.requires_grad else None
        return gx, gw

    return _make(y, (x, w), vjp, "conv_transpose")


def max_pool(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over all spatial dims (floor on ragged edges)."""
    x = as_tensor(x)
    nd = x.ndim - 2
    out = tuple(n // size for n in x.shape[2:])
    if any(o < 1 for o in out):
        raise ShapeError(f"max_pool: input {x.shape} smaller than window {size}")
    crop = x.data[(slice(None), slice(None)) + tuple(slice(0, o * size) for o in out)]
    shape = x.shape[:2] + tuple(v for o in out for v in (o, size))
    r = crop.reshape(shape)
    perm = (0, 1) + tuple(2 + 2 * i for i in range(nd)) + tuple(3 + 2 * i for i in range(nd))
    r = r.transpose(perm).reshape(x.shape[:2] + out + (size**nd,))
    arg = r.argmax(axis=-1)
    y = np.take_along_axis(r, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gr = np.zeros_like(r)
        np.put_along_axis(gr, arg[..., None], g[..., None], axis=-1)
        gr = gr.reshape(x.shape[:2] + out + (size,) * nd)
        inv = np.argsort(perm)
        gcrop = gr.transpose(inv).reshape(crop.shape)
        gx = np.zeros_like(x.data)
        gx[(slice(None), slice(None)) + tuple(slice(0, o * size) for o in out)] = gcrop
        return (gx,)

    return _make(y, (x,), vjp, "max_pool")


# losses


def binary_cross_entropy(p, target, eps: float = np.finfo(np.float64).eps) -> Tensor:
    """Elementwise -[t log p + (1 - t) log(1 - p)] with p clamped to [eps, 1 - eps]."""
    p = as_tensor(p)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeError(f"binary_cross_entropy: prediction {p.shape} vs target {t.shape}")
    pc = np.clip(p.data, eps, 1.0 - eps)
    out = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    inside = (p.data >= eps) & (p.data <= 1.0 - eps)
    return _make(out, (p,), lambda g: (g * inside * (pc - t) / (pc * (1.0 - pc)),), "bce")


def bce_with_logits(a, target) -> Tensor:
    """Elementwise BCE of sigmoid(a) against ``target``, in a numerically stable form."""
    a = as_tensor(a)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != a.shape:
        raise ShapeError(f"bce_with_logits: logits {a.shape} vs target {t.shape}")
    x = a.data
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * (_sigmoid(x) - t),), "bce_logits")
