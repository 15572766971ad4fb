"""Desk-scale rate-distortion training with the additive-noise proxy."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .entropy import rate_estimate
from .metrics import ms_ssim
from .model import InvCompressModel, ModelConfig

log = logging.getLogger(__name__)

# (lambda, N) quality presets used for the full-scale models
MSE_PRESETS = {
    "q1": (0.0016, 128), "q2": (0.0024, 128), "q3": (0.0032, 128), "q4": (0.0075, 128),
    "q5": (0.015, 192), "q6": (0.03, 192), "q7": (0.045, 192), "q8": (0.09, 192),
}
MSSSIM_PRESETS = {
    "ms1": (6.0, 128), "ms2": (12.0, 128), "ms3": (40.0, 192), "ms4": (120.0, 192),
    "ms5": (220.0, 192),
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lmbda: float = 0.01
    distortion: str = "mse"
    model: ModelConfig = field(default_factory=ModelConfig.toy)
    steps: int = 200
    lr: float = 1e-3
    # fractions of ``steps`` where the learning rate drops 10x
    decay_at: tuple[float, ...] = (0.75, 0.92)
    batch_size: int = 8
    crop: int = 32
    seed: int = 0
    check_every: int = 50

    def __post_init__(self):
        if self.lmbda < 0:
            raise ValueError("lambda must be non-negative")
        if self.distortion not in ("mse", "ms-ssim"):
            raise ValueError(f"unknown distortion {self.distortion!r}")
        if self.crop % 16:
            raise ValueError(f"crop size {self.crop} must be divisible by 16")

    @classmethod
    def from_preset(cls, name: str, **kw) -> "TrainConfig":
        if name in MSE_PRESETS:
            return cls(lmbda=MSE_PRESETS[name][0], distortion="mse", **kw)
        if name in MSSSIM_PRESETS:
            return cls(lmbda=MSSSIM_PRESETS[name][0], distortion="ms-ssim", **kw)
        raise KeyError(f"unknown quality preset {name!r}")

    def lr_at(self, step: int) -> float:
        drops = sum(step >= int(f * self.steps) for f in self.decay_at)
        return self.lr * 0.1 ** drops


def distortion(x, x_hat, kind: str = "mse"):
    """MSE on the 0..255 scale, or 1 - MS-SSIM."""
    if kind == "mse":
        diff = ad.scale(x_hat - x, 255.0)
        return ad.mean(diff * diff)
    if kind == "ms-ssim":
        return 1.0 - ms_ssim(x, x_hat)
    raise ValueError(f"unknown distortion {kind!r}")


def rd_loss(x, x_hat, likelihoods_y, likelihoods_z, cfg: TrainConfig) -> tuple[Tensor, Tensor, Tensor]:
    """(loss, rate in bpp, distortion) with loss = rate + lambda * distortion."""
    x, x_hat = ad.as_tensor(x), ad.as_tensor(x_hat)
    batch = x.shape[0] if x.ndim == 4 else 1
    pixels = batch * x.shape[-2] * x.shape[-1]
    lik_z = None if likelihoods_z is None else ad.as_tensor(likelihoods_z)
    rate = rate_estimate(ad.as_tensor(likelihoods_y), lik_z, pixels)
    dist = distortion(x, x_hat, cfg.distortion)
    return rate + ad.scale(dist, cfg.lmbda), rate, dist


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        if self.lr == 0:
            return
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)


def synthetic_images(n: int, size: int = 32, seed: int = 0) -> list[np.ndarray]:
    """Smooth colour gradients with a low-frequency ripple, values in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = []
    for _ in range(n):
        img = np.empty((3, size, size), np.float32)
        for c in range(3):
            a, b, d = rng.uniform(-0.5, 0.5, 3)
            fx, fy, ph = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
            img[c] = 0.5 + a * (xx - 0.5) + b * (yy - 0.5) + 0.15 * d * np.sin(
                2 * np.pi * (fx * xx + fy * yy) + ph)
        out.append(np.clip(img, 0.0, 1.0))
    return out


def random_crops(images: Sequence[np.ndarray], idx: np.ndarray, crop: int,
                 rng: np.random.Generator) -> np.ndarray:
    batch = []
    for i in idx:
        img = images[i]
        _, H, W = img.shape
        if H < crop or W < crop:
            raise ValueError(f"image {i} ({H}x{W}) is smaller than the {crop} crop")
        top, left = rng.integers(0, H - crop + 1), rng.integers(0, W - crop + 1)
        batch.append(img[:, top:top + crop, left:left + crop])
    return np.stack(batch)


def inn_roundtrip_error(model: InvCompressModel, x: np.ndarray) -> float:
    u = Tensor(x)
    back = model.inn.inverse(model.inn.forward(u))
    return float(np.abs(back.data - u.data).max())


def evaluate(model: InvCompressModel, images: Sequence[np.ndarray], cfg: TrainConfig,
             quantize: str = "noise", seed: int = 12345) -> dict:
    """Loss terms on the full image set with a fixed noise draw."""
    x = np.stack(images)
    out = model.forward_train(Tensor(x), np.random.default_rng(seed), quantize=quantize)
    loss, rate, dist = rd_loss(x, out["x_hat"], out["likelihoods_y"], out["likelihoods_z"], cfg)
    return {"loss": loss.item(), "bpp": rate.item(), "distortion": dist.item()}


@dataclass
class TrainResult:
    model: InvCompressModel
    history: list[dict]
    initial: dict
    final: dict

    def history_csv(self) -> str:
        buf = io.StringIO()
        keys = ["step", "lr", "loss", "bpp", "distortion", "inn_error"]
        writer = csv.DictWriter(buf, keys, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in self.history:
            writer.writerow({k: row.get(k, "") for k in keys})
        return buf.getvalue()


def _reproject(model: InvCompressModel, step: int) -> None:
    for conv in model.conv1x1_layers():
        if conv.reproject():
            log.warning("step %d: re-projected a near-singular 1x1 convolution", step)


def train(dataset: Sequence[np.ndarray], cfg: TrainConfig,
          model: InvCompressModel | None = None) -> TrainResult:
    model = InvCompressModel(cfg.model) if model is None else model
    params = model.parameters()
    opt = Adam(params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    probe = np.stack(dataset[:1])[:, :, :cfg.crop, :cfg.crop]
    _reproject(model, -1)
    initial = evaluate(model, dataset, cfg)
    history: list[dict] = []
    for step in range(cfg.steps):
        idx = rng.choice(len(dataset), size=min(cfg.batch_size, len(dataset)), replace=False)
        x = random_crops(dataset, idx, cfg.crop, rng)
        with Tape() as tape:
            out = model.forward_train(Tensor(x), rng)
            loss, rate, dist = rd_loss(x, out["x_hat"], out["likelihoods_y"],
                                       out["likelihoods_z"], cfg)
        if not math.isfinite(loss.item()):
            bad = [name for name, p in model.named_parameters() if not np.all(np.isfinite(p.data))]
            largest = max(float(np.abs(p.data[np.isfinite(p.data)]).max(initial=0.0)) for p in params)
            raise TrainingDiverged(
                f"non-finite loss at step {step}; non-finite parameters {bad[:3]}, "
                f"largest finite magnitude {largest:.3e}"
            )
        grads = tape.gradient(loss, params)
        bad = [name for (name, _), g in zip(model.named_parameters(), grads)
               if not np.all(np.isfinite(g))]
        if bad:
            raise TrainingDiverged(f"non-finite gradient at step {step} in {bad[:3]}")
        opt.lr = cfg.lr_at(step)
        opt.step(grads)
        _reproject(model, step)
        row = {"step": step, "lr": opt.lr, "loss": loss.item(), "bpp": rate.item(),
               "distortion": dist.item()}
        if step % cfg.check_every == 0 or step == cfg.steps - 1:
            row["inn_error"] = inn_roundtrip_error(model, probe)
        history.append(row)
    final = evaluate(model, dataset, cfg)
    return TrainResult(model, history, initial, final)
