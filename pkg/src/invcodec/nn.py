"""Tiny module system: parameter registry, convolution layer, seeded init."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LEAKY_SLOPE = 0.01


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def Parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Base class; parameters are discovered from instance attributes.

    Attribute order is insertion order, so parameter names and ordering are
    stable across runs, which the weight file and model hash rely on.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used by float64 gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_(self) -> "Module":
        for _, p in self.named_parameters():
            p.data = np.zeros_like(p.data)
        return self


def uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    """Random orthogonal matrix from the QR decomposition of a Gaussian draw."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    return q.astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, gain: float = 1.0):
        if kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel}")
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(gain * uniform_fan_in(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        self.bias = Parameter(gain * uniform_fan_in(rng, (out_ch,), fan_in))
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


def lrelu(x: Tensor) -> Tensor:
    return ad.leaky_relu(x, LEAKY_SLOPE)
