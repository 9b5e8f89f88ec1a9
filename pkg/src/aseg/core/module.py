"""Parameter containers and the few layer types the networks use."""
from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor


class Module:
    """Base class: discovers Parameters and sub-Modules through attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def fingerprint(self) -> str:
        """sha256 over parameter names and raw bytes."""
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()

    def _set_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name


def he_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 2.0) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1, padding: int | None = None):
        self.stride = stride
        self.padding = (k // 2) if padding is None else padding
        self.weight = Parameter(he_normal(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Parameter(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator):
        self.k = k
        self.weight = Parameter(he_normal(rng, (cin, cout, k, k), cin))
        self.bias = Parameter(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, stride=self.k)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, gain: float = 1.0):
        self.weight = Parameter(he_normal(rng, (din, dout), din, gain=gain))
        self.bias = Parameter(np.zeros(dout))

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)
