"""Full network: enhancement -> INN -> squeeze, plus the hyperprior."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .entropy import (
    ContextModel,
    FactorizedPrior,
    GaussianConditional,
    HyperAnalysis,
    HyperSynthesis,
    split_mean_scale,
)
from .inn import FeatureEnhancement, InnStack
from .nn import Module, make_rng
from .squeeze import ChannelSqueeze

CODING_PRECISION = 24


@dataclass
class ModelConfig:
    kernels: tuple[int, ...] = (5, 5, 3, 3)
    hidden: int = 32
    alpha: int = 6
    side_channels: int | None = None
    enhancement: bool = True
    context: bool = False
    seed: int = 0

    def __post_init__(self):
        self.kernels = tuple(int(k) for k in self.kernels)
        if not self.kernels:
            raise ValueError("need at least one invertible block")
        if any(k % 2 == 0 for k in self.kernels):
            raise ValueError(f"coupling kernel sizes must be odd, got {self.kernels}")
        if self.alpha < 1 or self.transform_channels % self.alpha:
            raise ValueError(
                f"alpha={self.alpha} must divide the {self.transform_channels} INN output channels"
            )

    @property
    def blocks(self) -> int:
        return len(self.kernels)

    @property
    def transform_channels(self) -> int:
        return 3 * 4 ** len(self.kernels)

    @property
    def latent_channels(self) -> int:
        return self.transform_channels // self.alpha

    @property
    def side(self) -> int:
        return self.latent_channels if self.side_channels is None else self.side_channels

    @property
    def pad_multiple(self) -> int:
        return 2 ** len(self.kernels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernels"] = list(self.kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def toy(cls, latent_channels: int = 8, **kw) -> "ModelConfig":
        """Two-block configuration (48 transform channels) for desk-scale runs."""
        if 48 % latent_channels:
            raise ValueError("toy latent channel count must divide 48")
        return cls(kernels=(5, 5), alpha=48 // latent_channels, **kw)


class InvCompressModel(Module):
    """All learnable parts of the codec plus its architecture config."""

    def __init__(self, config: ModelConfig | None = None):
        config = ModelConfig() if config is None else config
        self.config = config
        rng = make_rng(config.seed)
        n, nz = config.latent_channels, config.side
        self.enhance_enc = FeatureEnhancement(3, rng) if config.enhancement else None
        self.inn = InnStack(config.kernels, config.hidden, rng)
        self.squeeze = ChannelSqueeze(config.transform_channels, config.alpha, rng)
        self.hyper_analysis = HyperAnalysis(n, nz, rng)
        self.hyper_synthesis = HyperSynthesis(nz, n, rng)
        self.prior = FactorizedPrior(nz, rng)
        self.context_model = ContextModel(n, rng) if config.context else None
        self.enhance_dec = FeatureEnhancement(3, rng) if config.enhancement else None
        self.gaussian = GaussianConditional(precision=CODING_PRECISION)

    # -- transforms -------------------------------------------------------------------
    def transform(self, x: Tensor) -> Tensor:
        """x -> v, the INN output before the channel squeeze."""
        u = self.enhance_enc(x) if self.enhance_enc is not None else x
        return self.inn.forward(u)

    def analysis(self, x: Tensor) -> Tensor:
        return self.squeeze.forward(self.transform(x))

    def synthesis(self, y_hat: Tensor) -> Tensor:
        u_hat = self.inn.inverse(self.squeeze.inverse(y_hat))
        return self.enhance_dec(u_hat) if self.enhance_dec is not None else u_hat

    def hyper_out(self, z_hat: Tensor, size: tuple[int, int]) -> Tensor:
        return self.hyper_synthesis(z_hat, size)

    def mean_scale(self, hyper_out: Tensor, y_hat: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Gaussian parameters for y; the context path needs the (noisy) y_hat."""
        if self.context_model is None:
            return split_mean_scale(hyper_out)
        if y_hat is None:
            raise ValueError("context mode needs y_hat to predict means and scales")
        return self.context_model(y_hat, hyper_out)

    # -- training forward ---------------------------------------------------------------
    def forward_train(self, x: Tensor, rng: np.random.Generator | None = None,
                      quantize: str = "noise") -> dict:
        """Differentiable pass with the additive-noise quantization proxy.

        ``quantize="round"`` evaluates the same likelihoods on rounded values
        (mean-offset for y), for train/test consistency checks.
        """
        y = self.analysis(x)
        z = self.hyper_analysis(y)
        if quantize == "noise":
            z_hat = noisy_quantize(z, rng)
        elif quantize == "round":
            z_hat = ad.tround(z)
        else:
            raise ValueError(f"unknown quantize mode {quantize!r}")
        hyper = self.hyper_out(z_hat, y.shape[-2:])
        if quantize == "noise":
            y_hat = noisy_quantize(y, rng)
            mu, sigma = self.mean_scale(hyper, y_hat)
        elif self.context_model is None:
            mu, sigma = self.mean_scale(hyper)
            y_hat = ad.tround(y - mu) + mu
        else:
            # rounding around a mean that depends on y_hat itself needs the serial path
            y_hat = ad.tround(y)
            mu, sigma = self.mean_scale(hyper, y_hat)
        return {
            "x_hat": self.synthesis(y_hat),
            "y": y,
            "y_hat": y_hat,
            "z_hat": z_hat,
            "likelihoods_y": self.gaussian.likelihood(y_hat, mu, sigma),
            "likelihoods_z": self.prior.likelihood(z_hat),
        }

    def conv1x1_layers(self):
        return self.inn.conv1x1_layers()


def noisy_quantize(y: Tensor, rng: np.random.Generator | int | None) -> Tensor:
    """y + U(-0.5, 0.5) noise drawn from a seeded generator."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    noise = rng.uniform(-0.5, 0.5, size=y.shape).astype(y.dtype)
    # keep the noise strictly inside the open interval after the dtype cast
    edge = np.nextafter(y.dtype.type(0.5), y.dtype.type(0))
    return y + np.clip(noise, -edge, edge)
