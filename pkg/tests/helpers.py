"""Shared test oracles: central finite differences over the tensor primitives."""

import numpy as np

from poredesign.diffcore import tensor as T
from poredesign.diffcore.tensor import Tensor

H = 1e-5


def away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def distinct(rng, shape):
    # well-separated values so max-pool winners do not flip under the FD step
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 + 0.001 * rng.random(n)).reshape(shape) - 0.005 * n


def _conv_case(rng, nd, stride, padding):
    spatial = tuple(rng.integers(4, 7, nd))
    k = tuple(rng.integers(1, 4, nd))
    x = rng.standard_normal((2, 2) + spatial)
    w = rng.standard_normal((3, 2) + k)
    return [x, w], lambda x, w: T.conv(x, w, stride, padding)


def _convt_case(rng, nd, stride, padding):
    spatial = tuple(rng.integers(2, 5, nd))
    k = tuple(rng.integers(1, 4, nd))
    x = rng.standard_normal((2, 3) + spatial)
    w = rng.standard_normal((3, 2) + k)
    return [x, w], lambda x, w: T.conv_transpose(x, w, stride, padding)


def _bce_case(rng):
    p = rng.uniform(0.05, 0.95, (3, 4))
    t = rng.integers(0, 2, (3, 4)).astype(float)
    return [p], lambda p: T.binary_cross_entropy(p, t)


def _bce_logits_case(rng):
    a = rng.standard_normal((3, 4)) * 3
    t = rng.random((3, 4))
    return [a], lambda a: T.bce_with_logits(a, t)


def _getitem_case(rng):
    idx = (slice(1, None), np.array([0, 2, 2]))
    return [rng.standard_normal((3, 4))], lambda a: a[idx]


PRIMITIVES = {
    "add": lambda r: ([r.standard_normal((3, 4)), r.standard_normal((1, 4))], T.add),
    "sub": lambda r: ([r.standard_normal((3, 4)), r.standard_normal((3, 1))], T.sub),
    "mul": lambda r: ([r.standard_normal((2, 3, 4)), r.standard_normal((4,))], T.mul),
    "div": lambda r: ([r.standard_normal((3, 4)), r.uniform(0.5, 2.0, (3, 4))], T.div),
    "neg": lambda r: ([r.standard_normal((5,))], T.neg),
    "square": lambda r: ([r.standard_normal((3, 3))], T.square),
    "exp": lambda r: ([r.standard_normal((3, 3))], T.exp),
    "log": lambda r: ([r.uniform(0.2, 3.0, (3, 3))], T.log),
    "relu": lambda r: ([away_from_zero(r, (4, 5))], T.relu),
    "sigmoid": lambda r: ([r.standard_normal((4, 5)) * 3], T.sigmoid),
    "steep_sigmoid": lambda r: ([r.standard_normal((4, 5))], lambda a: T.steep_sigmoid(a, 5.0)),
    "clip": lambda r: ([away_from_zero(r, (4, 5)) * 2], lambda a: T.clip(a, -1.0 + 0.0123, 1.0 - 0.0123)),
    "sum": lambda r: ([r.standard_normal((3, 4, 2))], lambda a: T.tsum(a, axis=1)),
    "sum_all": lambda r: ([r.standard_normal((3, 4))], T.tsum),
    "mean": lambda r: ([r.standard_normal((3, 4, 2))], lambda a: T.mean(a, axis=(0, 2))),
    "reshape": lambda r: ([r.standard_normal((3, 4))], lambda a: T.reshape(a, (2, 6))),
    "flatten": lambda r: ([r.standard_normal((2, 3, 2))], T.flatten),
    "getitem": _getitem_case,
    "concat": lambda r: ([r.standard_normal((2, 3)), r.standard_normal((2, 2))], lambda a, b: T.concat([a, b], axis=1)),
    "matmul": lambda r: ([r.standard_normal((3, 4)), r.standard_normal((4, 2))], T.matmul),
    "conv1d_valid_s2": lambda r: _conv_case(r, 1, 2, "valid"),
    "conv2d_same": lambda r: _conv_case(r, 2, 1, "same"),
    "conv2d_same_s2": lambda r: _conv_case(r, 2, 2, "same"),
    "conv3d_valid": lambda r: _conv_case(r, 3, 1, "valid"),
    "conv3d_same_s2": lambda r: _conv_case(r, 3, 2, "same"),
    "convT2d_valid_s2": lambda r: _convt_case(r, 2, 2, "valid"),
    "convT2d_same_s2": lambda r: _convt_case(r, 2, 2, "same"),
    "convT3d_valid": lambda r: _convt_case(r, 3, 1, "valid"),
    "max_pool2d": lambda r: ([distinct(r, (2, 2, 5, 4))], lambda a: T.max_pool(a, 2)),
    "max_pool3d": lambda r: ([distinct(r, (1, 2, 4, 4, 5))], lambda a: T.max_pool(a, 2)),
    "bce": _bce_case,
    "bce_with_logits": _bce_logits_case,
}


def gradcheck(inputs, fn, rng, h=H) -> float:
    """Max normwise relative error between backward and central differences of sum(fn(*x) * R)."""
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    r = rng.standard_normal(out.shape)
    T.tsum(out * r).backward()
    worst = 0.0
    for i, x in enumerate(inputs):
        num = np.zeros_like(x)
        for j in np.ndindex(x.shape):
            xp = [v.copy() for v in inputs]
            xp[i][j] += h
            fp = np.sum(fn(*[Tensor(v) for v in xp]).data * r)
            xp[i][j] -= 2 * h
            fm = np.sum(fn(*[Tensor(v) for v in xp]).data * r)
            num[j] = (fp - fm) / (2 * h)
        ana = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(x)
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-12)
        worst = max(worst, float(np.abs(ana - num).max() / scale))
    return worst


def adjointness(rng, nd, stride, padding) -> float:
    """Relative gap between <conv(x, w), y> and <x, conv_transpose(y, w)>."""
    spatial = tuple(rng.integers(4, 9, nd))
    k = tuple(rng.integers(1, 4, nd))
    x = rng.standard_normal((2, 3) + spatial)
    w = rng.standard_normal((4, 3) + k)
    y = T.conv(x, w, stride, padding).data
    g = rng.standard_normal(y.shape)
    # conv weight (O, C, K) is the transposed conv weight (I=O, O=C, K)
    xt = T.conv_transpose(g, w, stride, padding, output_size=spatial).data
    lhs, rhs = float(np.sum(y * g)), float(np.sum(x * xt))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
