"""Minimal module system: parameter registration, freezing, init helpers."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype, relu


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(np.asarray(data, dtype=get_default_dtype()), requires_grad=requires_grad)


def normal_param(rng: np.random.Generator, shape, std: float) -> Parameter:
    return Parameter(rng.standard_normal(shape) * std)


def zeros_param(shape) -> Parameter:
    return Parameter(np.zeros(shape))


def full_param(shape, value: float) -> Parameter:
    return Parameter(np.full(shape, value))


class Module:
    """Container whose attributes may be parameters, modules or lists of modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in self.__dict__.items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(arrays))
        unknown = sorted(set(arrays) - set(params))
        if missing or unknown:
            raise KeyError(f"state mismatch: missing={missing} unknown={unknown}")
        for k, p in params.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"{k}: shape {arrays[k].shape} != {p.shape}")
            p.data = np.ascontiguousarray(arrays[k], dtype=p.dtype)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, gain: float = 1.0, bias: bool = True):
        self.weight = normal_param(rng, (d_in, d_out), gain / math.sqrt(d_in))
        self.bias = zeros_param((d_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad: int | None = None, gain: float = math.sqrt(2.0)):
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        self.weight = normal_param(rng, (c_out, c_in, k, k), gain / math.sqrt(c_in * k * k))
        self.bias = zeros_param((c_out,))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = full_param((d,), 1.0)
        self.bias = zeros_param((d,))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, -1, self.gain, self.bias, self.eps)


class MLP(Module):
    """Two linear layers with a ReLU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator,
                 in_gain: float = math.sqrt(2.0), out_gain: float = 1.0):
        self.fc1 = Linear(d_in, d_hidden, rng, gain=in_gain)
        self.fc2 = Linear(d_hidden, d_out, rng, gain=out_gain)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))
