"""Invertible analysis/synthesis transform.

The stack is a cascade of blocks; each block is one downscaling layer
(pixel shuffle + invertible 1x1 convolution) followed by three affine
coupling layers. A residual dense block (feature enhancement) sits outside
the invertible core on both the encoder and the decoder side.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv2d, Module, Parameter, lrelu, orthogonal

SCALE_CLAMP = 2.0
DET_EPS = 1e-8
COUPLINGS_PER_BLOCK = 3


def center_sigmoid(x: Tensor) -> Tensor:
    """SCALE_CLAMP * (sigmoid(x) - 0.5): zero at zero, bounded in (-1, 1)."""
    return ad.scale(ad.sigmoid(x) - 0.5, SCALE_CLAMP)


def _channels(t: Tensor, start: int, stop: int | None = None) -> Tensor:
    return t[..., start:stop, :, :]


class Bottleneck(Module):
    """Conv(k) - LeakyReLU - Conv(1) - LeakyReLU - Conv(k)."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, hidden: int, rng):
        self.conv1 = Conv2d(in_ch, hidden, kernel, rng)
        self.conv2 = Conv2d(hidden, hidden, 1, rng)
        self.conv3 = Conv2d(hidden, out_ch, kernel, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv3(lrelu(self.conv2(lrelu(self.conv1(x)))))


class CouplingLayer(Module):
    """Affine coupling with split position ``split`` (channels ``[0, split)`` first)."""

    def __init__(self, channels: int, kernel: int, hidden: int, rng, split: int | None = None):
        split = channels // 2 if split is None else split
        if not 0 < split < channels:
            raise ValueError(f"split position {split} must satisfy 0 < c < {channels}")
        self.channels = channels
        self.split = split
        rest = channels - split
        self.g1 = Bottleneck(split, rest, kernel, hidden, rng)
        self.h1 = Bottleneck(split, rest, kernel, hidden, rng)
        self.g2 = Bottleneck(rest, split, kernel, hidden, rng)
        self.h2 = Bottleneck(rest, split, kernel, hidden, rng)

    def _check(self, u: Tensor) -> None:
        if u.ndim < 3 or u.shape[-3] != self.channels:
            raise ValueError(
                f"coupling layer expects {self.channels} channels, got input shape {u.shape}"
            )

    def forward(self, u: Tensor) -> Tensor:
        self._check(u)
        c = self.split
        u1, u2 = _channels(u, 0, c), _channels(u, c)
        v1 = u1 * ad.exp(center_sigmoid(self.g2(u2))) + self.h2(u2)
        v2 = u2 * ad.exp(center_sigmoid(self.g1(v1))) + self.h1(v1)
        return ad.concat([v1, v2], axis=-3)

    def inverse(self, v: Tensor) -> Tensor:
        self._check(v)
        c = self.split
        v1, v2 = _channels(v, 0, c), _channels(v, c)
        u2 = (v2 - self.h1(v1)) * ad.exp(-center_sigmoid(self.g1(v1)))
        u1 = (v1 - self.h2(u2)) * ad.exp(-center_sigmoid(self.g2(u2)))
        return ad.concat([u1, u2], axis=-3)


class InvertibleConv1x1(Module):
    def __init__(self, channels: int, rng):
        self.weight = Parameter(orthogonal(rng, channels))

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    def determinant(self) -> float:
        return float(np.linalg.det(self.weight.data.astype(np.float64)))

    def check_invertible(self) -> None:
        det = self.determinant()
        if abs(det) <= DET_EPS:
            raise ValueError(f"1x1 convolution matrix is singular (det={det:.3e})")

    def _apply(self, t: Tensor, matrix: Tensor) -> Tensor:
        if t.shape[-3] != self.channels:
            raise ValueError(f"1x1 conv expects {self.channels} channels, got shape {t.shape}")
        n = self.channels
        return ad.conv2d(t, ad.reshape(matrix, (n, n, 1, 1)))

    def forward(self, t: Tensor) -> Tensor:
        return self._apply(t, self.weight)

    def inverse(self, t: Tensor) -> Tensor:
        self.check_invertible()
        return self._apply(t, ad.inverse(self.weight))

    def reproject(self) -> bool:
        """Replace a near-singular matrix with its nearest orthogonal matrix."""
        if abs(self.determinant()) >= DET_EPS:
            return False
        u, _, vt = np.linalg.svd(self.weight.data.astype(np.float64))
        self.weight.data = (u @ vt).astype(self.weight.dtype)
        return True


class DownscaleLayer(Module):
    """Pixel shuffle (C -> 4C, resolution / 2) followed by an invertible 1x1 conv."""

    def __init__(self, in_channels: int, rng):
        self.conv = InvertibleConv1x1(4 * in_channels, rng)

    def forward(self, t: Tensor) -> Tensor:
        return self.conv.forward(ad.pixel_shuffle_down(t))

    def inverse(self, t: Tensor) -> Tensor:
        return ad.pixel_shuffle_up(self.conv.inverse(t))


class InvBlock(Module):
    def __init__(self, in_channels: int, kernel: int, hidden: int, rng):
        self.down = DownscaleLayer(in_channels, rng)
        ch = 4 * in_channels
        self.couplings = [CouplingLayer(ch, kernel, hidden, rng) for _ in range(COUPLINGS_PER_BLOCK)]

    def forward(self, t: Tensor) -> Tensor:
        t = self.down.forward(t)
        for layer in self.couplings:
            t = layer.forward(t)
        return t

    def inverse(self, t: Tensor) -> Tensor:
        for layer in reversed(self.couplings):
            t = layer.inverse(t)
        return self.down.inverse(t)


class InnStack(Module):
    """Cascade of invertible blocks: 3xHxW -> (3*4^n)x(H/2^n)x(W/2^n)."""

    def __init__(self, kernels: Sequence[int] = (5, 5, 3, 3), hidden: int = 32,
                 rng=None, in_channels: int = 3):
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_channels = in_channels
        self.blocks = []
        ch = in_channels
        for k in kernels:
            self.blocks.append(InvBlock(ch, k, hidden, rng))
            ch *= 4

    @property
    def factor(self) -> int:
        return 2 ** len(self.blocks)

    @property
    def out_channels(self) -> int:
        return self.in_channels * 4 ** len(self.blocks)

    def _check(self, u: Tensor) -> None:
        H, W = u.shape[-2:]
        if H % self.factor or W % self.factor:
            raise ValueError(
                f"input spatial size {H}x{W} must be divisible by {self.factor}; pad first"
            )

    def forward(self, u: Tensor) -> Tensor:
        self._check(u)
        for block in self.blocks:
            u = block.forward(u)
        return u

    def inverse(self, v: Tensor) -> Tensor:
        for block in reversed(self.blocks):
            v = block.inverse(v)
        return v

    def conv1x1_layers(self) -> list[InvertibleConv1x1]:
        return [b.down.conv for b in self.blocks]

    def couplings(self) -> list[CouplingLayer]:
        return [c for b in self.blocks for c in b.couplings]


class FeatureEnhancement(Module):
    """Residual dense block: cascaded convs with kernels (1, 3, 1).

    Each stage sees the concatenation of the module input and all previous
    stage outputs; a final 1x1 projection maps back to the input width and is
    added to the input.
    """

    def __init__(self, channels: int = 3, rng=None, growth: int | None = None,
                 kernels: Sequence[int] = (1, 3, 1)):
        rng = np.random.default_rng(0) if rng is None else rng
        growth = channels if growth is None else growth
        self.channels = channels
        self.stages = []
        width = channels
        for k in kernels:
            self.stages.append(Conv2d(width, growth, k, rng))
            width += growth
        self.project = Conv2d(width, channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-3] != self.channels:
            raise ValueError(f"enhancement expects {self.channels} channels, got shape {x.shape}")
        feats = [x]
        for conv in self.stages:
            inp = feats[0] if len(feats) == 1 else ad.concat(feats, axis=-3)
            feats.append(lrelu(conv(inp)))
        return x + self.project(ad.concat(feats, axis=-3))
