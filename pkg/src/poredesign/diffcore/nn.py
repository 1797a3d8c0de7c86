"""Layers built from the tensor primitives.  Weights use seeded He-uniform init."""

from __future__ import annotations

from math import prod, sqrt

import numpy as np

from . import tensor as T
from .tensor import Tensor


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Parameter container; ``named_parameters`` yields in a fixed order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def __call__(self, x):
        return self.forward(x)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, activation: str | None = None):
        self.w = he_uniform(rng, (n_in, n_out), n_in)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)
        self.activation = activation

    def forward(self, x):
        return _activate(T.matmul(x, self.w) + self.b, self.activation)


class Conv(Module):
    """N-d convolution layer (channels first)."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding="valid", activation="relu", nd=2):
        kernel = (kernel,) * nd if isinstance(kernel, int) else tuple(kernel)
        self.w = he_uniform(rng, (c_out, c_in) + kernel, c_in * prod(kernel))
        self.b = Tensor(np.zeros((1, c_out) + (1,) * nd), requires_grad=True)
        self.stride, self.padding, self.activation = stride, padding, activation

    def forward(self, x):
        return _activate(T.conv(x, self.w, self.stride, self.padding) + self.b, self.activation)


class ConvTranspose(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding="valid", activation="relu", nd=2,
                 output_size=None):
        kernel = (kernel,) * nd if isinstance(kernel, int) else tuple(kernel)
        self.w = he_uniform(rng, (c_in, c_out) + kernel, c_in * prod(kernel))
        self.b = Tensor(np.zeros((1, c_out) + (1,) * nd), requires_grad=True)
        self.stride, self.padding, self.activation = stride, padding, activation
        self.output_size = output_size

    def forward(self, x):
        y = T.conv_transpose(x, self.w, self.stride, self.padding, self.output_size)
        return _activate(y + self.b, self.activation)


class MaxPool(Module):
    def __init__(self, size: int = 2):
        self.size = size

    def forward(self, x):
        return T.max_pool(x, self.size)


class Flatten(Module):
    def forward(self, x):
        return T.flatten(x)


class Reshape(Module):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, x):
        return T.reshape(x, (x.shape[0],) + self.shape)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def _activate(x, activation):
    if activation is None:
        return x
    if activation == "relu":
        return T.relu(x)
    if activation == "sigmoid":
        return T.sigmoid(x)
    raise ValueError(f"unknown activation {activation!r}")
