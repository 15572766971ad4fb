"""Attentive channel squeeze and the averaging-deviation diagnostics.

Grouping convention: for ratio ``alpha`` and ``n = d / alpha`` output
channels, group ``g`` covers input channels ``[g*n, (g+1)*n)``; i.e. the
input is read as ``(alpha, n, h, w)`` in row-major order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv2d, Module, lrelu


def channel_average(v: Tensor, alpha: int) -> Tensor:
    """Mean over the ``alpha`` channel groups: (..., alpha*n, h, w) -> (..., n, h, w)."""
    *lead, d, h, w = v.shape
    if alpha < 1 or d % alpha:
        raise ValueError(f"channel count {d} is not divisible by alpha={alpha}")
    if alpha == 1:
        return v
    grouped = ad.reshape(v, (*lead, alpha, d // alpha, h, w))
    return ad.mean(grouped, axis=len(lead))


def channel_copy(y: Tensor, alpha: int) -> Tensor:
    """Stack ``alpha`` copies along channels: (..., n, h, w) -> (..., alpha*n, h, w)."""
    if alpha == 1:
        return y
    return ad.concat([y] * alpha, axis=-3)


class ResidualUnit(Module):
    def __init__(self, channels: int, rng):
        hidden = max(channels // 2, 1)
        self.conv1 = Conv2d(channels, hidden, 3, rng)
        self.conv2 = Conv2d(hidden, channels, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(lrelu(self.conv1(x)))


class Attention(Module):
    """x + trunk(x) * sigmoid(mask(x)).

    Both branches are three residual units followed by a 1x1 conv, so zeroing
    the trunk's projection makes the module the identity.
    """

    def __init__(self, channels: int, rng, units: int = 3):
        self.channels = channels
        self.trunk = [ResidualUnit(channels, rng) for _ in range(units)]
        self.trunk_out = Conv2d(channels, channels, 1, rng)
        self.mask = [ResidualUnit(channels, rng) for _ in range(units)]
        self.mask_out = Conv2d(channels, channels, 1, rng)

    def gate(self, x: Tensor) -> Tensor:
        m = x
        for unit in self.mask:
            m = unit(m)
        return ad.sigmoid(self.mask_out(m))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-3] != self.channels:
            raise ValueError(f"attention expects {self.channels} channels, got shape {x.shape}")
        t = x
        for unit in self.trunk:
            t = unit(t)
        return x + self.trunk_out(t) * self.gate(x)

    def make_identity(self) -> "Attention":
        self.trunk_out.zero_()
        return self


class ChannelSqueeze(Module):
    def __init__(self, channels: int, alpha: int, rng):
        if alpha < 1 or channels % alpha:
            raise ValueError(f"alpha={alpha} must divide the channel count {channels}")
        self.channels = channels
        self.alpha = alpha
        self.encode_attention = Attention(channels // alpha, rng)
        self.decode_attention = Attention(channels // alpha, rng)

    @property
    def latent_channels(self) -> int:
        return self.channels // self.alpha

    def forward(self, v: Tensor) -> Tensor:
        if v.shape[-3] != self.channels:
            raise ValueError(f"squeeze expects {self.channels} channels, got shape {v.shape}")
        return self.encode_attention(channel_average(v, self.alpha))

    def inverse(self, y_hat: Tensor) -> Tensor:
        if y_hat.shape[-3] != self.latent_channels:
            raise ValueError(
                f"squeeze inverse expects {self.latent_channels} channels, got shape {y_hat.shape}"
            )
        return channel_copy(self.decode_attention(y_hat), self.alpha)


@dataclass
class DeviationReport:
    epsilon: float
    mu: float
    scaled_epsilon: float | None
    deviation_map: np.ndarray
    alpha: int

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "epsilon": self.epsilon,
            "mu": self.mu,
            "scaled_epsilon": self.scaled_epsilon,
            "map_shape": list(self.deviation_map.shape),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def save_map_pgm(self, path) -> None:
        """Write the deviation map as an 8-bit PGM, scaled so the maximum is 255."""
        m = self.deviation_map.astype(np.float64)
        peak = m.max() if m.size else 0.0
        img = np.zeros(m.shape, np.uint8) if peak <= 0 else np.round(m / peak * 255).astype(np.uint8)
        h, w = img.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(img.tobytes())


def deviation_report(v, alpha: int) -> DeviationReport:
    """Deviation introduced by averaging ``v`` (d x h x w) in groups of ``alpha``.

    ``epsilon`` sums the absolute deviation over the members of each group
    and averages over the ``l = (d/alpha)*h*w`` group positions. ``mu`` is the
    mean absolute value of ``v``. The map averages the per-position scaled
    deviation over output channels, so its mean equals ``scaled_epsilon``.
    """
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    if v.ndim != 3:
        raise ValueError(f"expected a d x h x w tensor, got shape {v.shape}")
    d, h, w = v.shape
    if alpha < 1 or d % alpha:
        raise ValueError(f"channel count {d} is not divisible by alpha={alpha}")
    gamma = v.reshape(alpha, d // alpha, h, w)
    gamma_hat = gamma.mean(axis=0)
    dev = np.abs(gamma - gamma_hat).sum(axis=0)
    epsilon = float(dev.mean())
    mu = float(np.abs(v).mean())
    if mu == 0.0:
        return DeviationReport(epsilon, 0.0, None, np.zeros((h, w)), alpha)
    return DeviationReport(epsilon, mu, epsilon / mu, dev.mean(axis=0) / mu, alpha)
