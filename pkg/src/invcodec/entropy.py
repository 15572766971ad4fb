"""Entropy models: likelihoods for training and quantized CDF tables for coding.

* :class:`FactorizedPrior` - per-channel learned monotone cumulative for z.
* :class:`GaussianConditional` - mean-scale Gaussian for y given the hyperprior.
* :class:`HyperAnalysis` / :class:`HyperSynthesis` - side-information transforms.
* :class:`ContextModel` - masked 5x5 autoregressive context over decoded y.
* :class:`CdfTable` / :func:`build_cdf_table` - the contract with the rANS coder.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv2d, Module, Parameter, lrelu

DEFAULT_PRECISION = 16
LIKELIHOOD_FLOOR = 1e-9
SCALE_BOUND = 0.11


# -- CDF tables -----------------------------------------------------------------------
@dataclass(frozen=True)
class CdfTable:
    """Integer frequencies for symbols ``offset .. offset + n - 1``.

    With ``escape`` set, the last entry is an escape bin carrying the tail
    mass; values outside the regular range are coded as the escape symbol
    followed by a bypass-coded value (see :mod:`invcodec.codec`).
    """

    offset: int
    freqs: tuple[int, ...]
    precision: int = DEFAULT_PRECISION
    escape: bool = False

    def __post_init__(self):
        if any(f < 1 for f in self.freqs):
            raise ValueError("every symbol needs a frequency of at least 1")
        if sum(self.freqs) != 1 << self.precision:
            raise ValueError(
                f"frequencies sum to {sum(self.freqs)}, expected {1 << self.precision}"
            )

    @property
    def size(self) -> int:
        return len(self.freqs)

    @property
    def num_regular(self) -> int:
        return self.size - 1 if self.escape else self.size

    @property
    def escape_index(self) -> int | None:
        return self.size - 1 if self.escape else None

    @property
    def cumulative(self) -> tuple[int, ...]:
        return _cumulative(self.freqs)

    def index_of(self, value: int) -> int | None:
        """Table index of a regular symbol value, or None when out of range."""
        idx = int(value) - self.offset
        return idx if 0 <= idx < self.num_regular else None

    def bits(self, index: int) -> float:
        return self.precision - float(np.log2(self.freqs[index]))

    def to_bytes(self) -> bytes:
        head = struct.pack("<iBBI", self.offset, self.precision, int(self.escape), self.size)
        return head + np.asarray(self.freqs, dtype="<u4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CdfTable":
        offset, precision, escape, n = struct.unpack_from("<iBBI", data)
        freqs = np.frombuffer(data, dtype="<u4", count=n, offset=struct.calcsize("<iBBI"))
        return cls(offset, tuple(int(f) for f in freqs), precision, bool(escape))


@lru_cache(maxsize=4096)
def _cumulative(freqs: tuple[int, ...]) -> tuple[int, ...]:
    return (0, *np.cumsum(freqs, dtype=np.int64).tolist())


def build_cdf_table(pmf, offset: int = 0, precision: int = DEFAULT_PRECISION,
                    escape: bool = False) -> CdfTable:
    """Quantize bin probabilities to integer frequencies summing to 2**precision.

    Frequencies are rounded, floored at 1 and the rounding surplus or deficit
    is settled on the largest bins, so the result is deterministic. Without an
    escape bin the pmf must cover all but ``2 * 2**-precision`` of the mass.
    """
    p = np.asarray(pmf, dtype=np.float64).ravel()
    if p.size == 0 or not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError("pmf must be a non-empty array of finite non-negative values")
    total = 1 << precision
    missing = 1.0 - p.sum()
    if escape:
        p = np.append(p, max(missing, 0.0))
    elif missing > 2.0 ** (1 - precision) + 1e-12:
        raise ValueError(
            f"support too small: it leaves {missing:.3e} of the probability mass uncovered"
        )
    if p.size > total:
        raise ValueError(f"{p.size} symbols cannot fit in precision {precision}")
    if p.sum() <= 0:
        raise ValueError("pmf has zero total mass")
    p = p / p.sum()
    f = np.maximum(1, np.round(p * total)).astype(np.int64)
    diff = total - int(f.sum())
    if diff > 0:
        f[int(np.argmax(f))] += diff
    while diff < 0:
        for i in np.argsort(-f, kind="stable"):
            take = min(int(f[i]) - 1, -diff)
            f[i] -= take
            diff += take
            if diff == 0:
                break
    return CdfTable(int(offset), tuple(int(x) for x in f), precision, escape)


def uniform_table(n: int, precision: int = DEFAULT_PRECISION) -> CdfTable:
    return build_cdf_table(np.full(n, 1.0 / n), 0, precision)


def gaussian_bin_probs(values, sigma: float) -> np.ndarray:
    """P(round(X) = v) for X ~ N(0, sigma^2), evaluated on the far side of the mode."""
    a = np.abs(np.asarray(values, dtype=np.float64))
    return special.ndtr((0.5 - a) / sigma) - special.ndtr((-0.5 - a) / sigma)


def gaussian_table(sigma: float, precision: int = DEFAULT_PRECISION,
                   escape: bool = True) -> CdfTable:
    """Zero-centred table for a unit-bin discretized Gaussian."""
    z = -special.ndtri(2.0 ** -(precision + 1))
    half = max(int(np.ceil(z * sigma - 0.5)), 1)
    support = np.arange(-half, half + 1)
    return build_cdf_table(gaussian_bin_probs(support, sigma), -half, precision, escape)


# -- rate -----------------------------------------------------------------------------
def _check_likelihoods(lik) -> None:
    # NaN is passed through so training can report the diverging step
    arr = lik.data if isinstance(lik, Tensor) else np.asarray(lik)
    if arr.size and (np.any(arr <= 0) or np.any(arr > 1 + 1e-6)):
        raise ValueError("likelihoods must lie in (0, 1]")


def rate_bits(lik):
    """Total information content -sum(log2 p); differentiable for tensors."""
    _check_likelihoods(lik)
    if isinstance(lik, Tensor):
        return ad.scale(ad.tsum(ad.log(lik)), -1.0 / np.log(2.0))
    arr = np.asarray(lik, dtype=np.float64)
    return float(-np.log2(arr).sum()) if arr.size else 0.0


def rate_estimate(likelihoods_y, likelihoods_z, num_pixels: int):
    """Bits per pixel from the y and z likelihoods.

    Returns a differentiable scalar Tensor when either input is a Tensor,
    otherwise a float. ``likelihoods_z`` may be None for the single-term form.
    """
    if num_pixels <= 0:
        raise ValueError("num_pixels must be positive")
    total = rate_bits(likelihoods_y)
    if likelihoods_z is not None:
        total = total + rate_bits(likelihoods_z)
    if isinstance(total, Tensor):
        return ad.scale(total, 1.0 / num_pixels)
    return total / num_pixels


# -- factorized prior -----------------------------------------------------------------
class FactorizedPrior(Module):
    """Per-channel univariate density with a learned monotone cumulative.

    Each channel runs its own small network: ``len(filters) + 1`` stages of
    (softplus matrix, bias, tanh gate) followed by a sigmoid. Softplus keeps
    every matrix non-negative and the gates are bounded, so the cumulative
    is monotone in its input.
    """

    def __init__(self, channels: int, rng, filters=(3, 3, 3), init_scale: float = 2.0,
                 tail_mass: float = 1e-9):
        self.channels = channels
        self.tail_mass = tail_mass
        dims = (1, *filters, 1)
        stage_scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices, self.biases, self.factors = [], [], []
        for i in range(len(dims) - 1):
            init = np.log(np.expm1(1.0 / stage_scale / dims[i + 1]))
            self.matrices.append(Parameter(np.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(Parameter(rng.uniform(-0.5, 0.5, (channels, dims[i + 1], 1))))
            if i < len(dims) - 2:
                self.factors.append(Parameter(np.zeros((channels, dims[i + 1], 1))))

    def logits(self, x: Tensor) -> Tensor:
        """Cumulative logits for ``x`` shaped (channels, 1, M)."""
        for i, matrix in enumerate(self.matrices):
            x = ad.matmul(ad.softplus(matrix), x)
            x = x + ad.broadcast_to(self.biases[i], x.shape)
            if i < len(self.factors):
                x = x + ad.broadcast_to(ad.tanh(self.factors[i]), x.shape) * ad.tanh(x)
        return x

    def cumulative(self, x: Tensor) -> Tensor:
        return ad.sigmoid(self.logits(x))

    def _to_channel_rows(self, values: Tensor) -> tuple[Tensor, tuple, tuple]:
        if values.ndim < 3 or values.shape[-3] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got shape {values.shape}")
        ndim = values.ndim
        perm = (ndim - 3, *[i for i in range(ndim) if i != ndim - 3])
        moved = ad.transpose(values, perm)
        return ad.reshape(moved, (self.channels, 1, -1)), moved.shape, perm

    def likelihood(self, values: Tensor) -> Tensor:
        """P(v - 0.5 < X < v + 0.5) elementwise, floored at LIKELIHOOD_FLOOR."""
        values = ad.as_tensor(values)
        rows, moved_shape, perm = self._to_channel_rows(values)
        lower = self.logits(rows - 0.5)
        upper = self.logits(rows + 0.5)
        # evaluate on the side of the median where the sigmoid is not saturated
        sign = np.where(lower.data + upper.data > 0, -1.0, 1.0).astype(lower.dtype)
        lik = ad.absolute(ad.sigmoid(upper * sign) - ad.sigmoid(lower * sign))
        lik = ad.clamp_min(lik, LIKELIHOOD_FLOOR)
        lik = ad.reshape(lik, moved_shape)
        return ad.transpose(lik, tuple(np.argsort(perm)))

    def tables(self, precision: int = DEFAULT_PRECISION, max_range: int = 512) -> list[CdfTable]:
        """One escape-enabled CDF table per channel."""
        edges = np.arange(-max_range - 1, max_range + 1, dtype=np.float64) + 0.5
        x = Tensor(np.broadcast_to(edges, (self.channels, 1, edges.size)), dtype=np.float64)
        cdf = special.expit(self.logits(x).data.astype(np.float64))[:, 0, :]
        budget = 2.0 ** -(precision + 1)
        tables = []
        for c in range(self.channels):
            row = cdf[c]
            # row[k] = c(v + 0.5) for v = k - max_range - 1
            below = np.nonzero(row <= budget)[0]
            above = np.nonzero(1.0 - row <= budget)[0]
            lo_k = below[-1] + 1 if below.size else 0
            hi_k = above[0] if above.size else row.size - 1
            lo_k = min(lo_k, hi_k)
            lower = row[lo_k - 1] if lo_k > 0 else 0.0
            pmf = np.diff(np.concatenate([[lower], row[lo_k:hi_k + 1]]))
            tables.append(build_cdf_table(np.maximum(pmf, 0.0), lo_k - max_range - 1,
                                          precision, escape=True))
        return tables


# -- mean-scale Gaussian ---------------------------------------------------------------
def default_scale_table(lo: float = SCALE_BOUND, hi: float = 256.0, levels: int = 64) -> np.ndarray:
    return np.exp(np.linspace(np.log(lo), np.log(hi), levels))


class GaussianConditional:
    """Discretized Gaussian N(mu, sigma^2) over unit bins."""

    def __init__(self, scale_bound: float = SCALE_BOUND, scale_table=None,
                 precision: int = DEFAULT_PRECISION):
        if scale_bound <= 0:
            raise ValueError("scale bound must be positive")
        self.scale_bound = scale_bound
        self.scale_table = default_scale_table(scale_bound) if scale_table is None else np.asarray(scale_table)
        self.precision = precision
        self._tables: dict[int, CdfTable] = {}

    def likelihood(self, values, mu, sigma) -> Tensor:
        values, mu, sigma = ad.as_tensor(values), ad.as_tensor(mu), ad.as_tensor(sigma)
        if not values.shape == mu.shape == sigma.shape:
            raise ValueError(
                f"shape mismatch: values {values.shape}, mu {mu.shape}, sigma {sigma.shape}"
            )
        sigma = ad.clamp_min(sigma, self.scale_bound)
        r = ad.absolute(values - mu)
        upper = ad.normal_cdf((0.5 - r) / sigma)
        lower = ad.normal_cdf((-0.5 - r) / sigma)
        return ad.clamp_min(upper - lower, LIKELIHOOD_FLOOR)

    def scale_index(self, sigma) -> np.ndarray:
        """Index of the smallest table scale not below each sigma."""
        sigma = np.maximum(np.asarray(sigma, dtype=np.float64), self.scale_bound)
        idx = np.searchsorted(self.scale_table, sigma, side="left")
        return np.minimum(idx, len(self.scale_table) - 1)

    def table(self, index: int) -> CdfTable:
        index = int(index)
        if index not in self._tables:
            self._tables[index] = gaussian_table(float(self.scale_table[index]), self.precision)
        return self._tables[index]


def gaussian_likelihood(gc: GaussianConditional, values, mu, sigma) -> Tensor:
    return gc.likelihood(values, mu, sigma)


# -- hyper transforms -------------------------------------------------------------------
class HyperAnalysis(Module):
    """y (N x h x w) -> z (Nz x ceil(h/4) x ceil(w/4))."""

    def __init__(self, channels: int, side_channels: int, rng):
        self.conv1 = Conv2d(channels, side_channels, 3, rng)
        self.conv2 = Conv2d(side_channels, side_channels, 5, rng, stride=2)
        self.conv3 = Conv2d(side_channels, side_channels, 5, rng, stride=2)

    def __call__(self, y: Tensor) -> Tensor:
        return self.conv3(lrelu(self.conv2(lrelu(self.conv1(y)))))


class HyperSynthesis(Module):
    """z_hat -> 2N channels (means then raw scales), cropped to the latent size."""

    def __init__(self, side_channels: int, channels: int, rng):
        self.conv1 = Conv2d(side_channels, channels, 5, rng)
        self.conv2 = Conv2d(channels, channels, 5, rng)
        self.conv3 = Conv2d(channels, 2 * channels, 3, rng)

    def __call__(self, z_hat: Tensor, size: tuple[int, int]) -> Tensor:
        t = lrelu(self.conv1(ad.upsample_nearest(z_hat)))
        t = self.conv3(lrelu(self.conv2(ad.upsample_nearest(t))))
        h, w = size
        if t.shape[-2] < h or t.shape[-1] < w:
            raise ValueError(f"side latents {z_hat.shape} too small for a {h}x{w} latent")
        return t[..., :h, :w]


def split_mean_scale(params: Tensor) -> tuple[Tensor, Tensor]:
    n = params.shape[-3] // 2
    return params[..., :n, :, :], ad.softplus(params[..., n:, :, :])


# -- context model -------------------------------------------------------------------------
def causal_mask(kernel: int = 5) -> np.ndarray:
    """1 for positions strictly before the centre in raster order."""
    mask = np.zeros((kernel, kernel), np.float32)
    c = kernel // 2
    mask[:c, :] = 1
    mask[c, :c] = 1
    return mask


class ContextModel(Module):
    """Masked 5x5 convolution over y_hat fused with the hyper features by 1x1 convs."""

    kernel = 5

    def __init__(self, channels: int, rng):
        self.channels = channels
        self.context = Conv2d(channels, 2 * channels, self.kernel, rng)
        self.fuse1 = Conv2d(4 * channels, 2 * channels, 1, rng)
        self.fuse2 = Conv2d(2 * channels, 2 * channels, 1, rng)
        self.mask = causal_mask(self.kernel)

    def _masked_weight(self) -> Tensor:
        return self.context.weight * np.broadcast_to(self.mask, self.context.weight.shape)

    def _fuse(self, ctx: Tensor, hyper_out: Tensor) -> tuple[Tensor, Tensor]:
        t = self.fuse2(lrelu(self.fuse1(ad.concat([ctx, hyper_out], axis=-3))))
        return split_mean_scale(t)

    def __call__(self, y_hat: Tensor, hyper_out: Tensor) -> tuple[Tensor, Tensor]:
        """Parallel (training / estimation) path over the whole latent."""
        pad = self.kernel // 2
        ctx = ad.conv2d(y_hat, self._masked_weight(), self.context.bias, 1, pad)
        return self._fuse(ctx, hyper_out)

    def predict_at(self, y_partial: np.ndarray, hyper_out: np.ndarray, i: int, j: int
                   ) -> tuple[np.ndarray, np.ndarray]:
        """(mu, sigma) for spatial position (i, j) of a C x h x w latent.

        Only the causal window around (i, j) is read. Encoder and decoder
        both go through this function so their parameters agree bit for bit.
        """
        pad = self.kernel // 2
        padded = np.pad(y_partial, ((0, 0), (pad, pad), (pad, pad)))
        window = Tensor(padded[:, i:i + self.kernel, j:j + self.kernel])
        ctx = ad.conv2d(window, self._masked_weight(), self.context.bias)
        mu, sigma = self._fuse(ctx, Tensor(hyper_out[:, i:i + 1, j:j + 1]))
        return mu.data[:, 0, 0], sigma.data[:, 0, 0]


def context_predict(cm: ContextModel, y_hat_partial, hyper_out, position: tuple[int, int]):
    y = y_hat_partial.data if isinstance(y_hat_partial, Tensor) else np.asarray(y_hat_partial)
    h = hyper_out.data if isinstance(hyper_out, Tensor) else np.asarray(hyper_out)
    return cm.predict_at(y, h, *position)
