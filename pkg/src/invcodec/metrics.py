"""Distortion and rate metrics: PSNR, MS-SSIM, RD points and AUC."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from decimal import Decimal
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def psnr(a, b) -> float:
    """PSNR in dB of [0, 1] images compared on the 8-bit scale (peak 255)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((255.0 * a - 255.0 * b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(255.0 ** 2 / mse))


def msssim_db(v: float) -> float:
    """-10 log10(1 - v); the complement is taken in decimal so 0.9 gives 10.0."""
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"MS-SSIM value {v} outside [0, 1]")
    if v == 1.0:
        return math.inf
    return -10.0 * math.log10(float(1 - Decimal(repr(float(v)))))


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    g = np.exp(-((np.arange(size) - size // 2) ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def msssim_levels(height: int, width: int, strict: bool = False) -> int:
    """Number of dyadic scales the 11-tap window fits into (at most 5)."""
    side = min(height, width)
    if strict:
        if side < WINDOW * 2 ** (len(MSSSIM_WEIGHTS) - 1):
            raise ValueError(
                f"{height}x{width} is too small for 5-scale MS-SSIM (needs >= 176 px per side)"
            )
        return len(MSSSIM_WEIGHTS)
    levels = 0
    while levels < len(MSSSIM_WEIGHTS) and side // 2 ** levels >= WINDOW:
        levels += 1
    if levels == 0:
        raise ValueError(f"{height}x{width} is smaller than the {WINDOW}x{WINDOW} window")
    return levels


def _blur(x: Tensor, kernel: np.ndarray) -> Tensor:
    c = x.shape[-3]
    w = np.zeros((c, c, *kernel.shape), dtype=x.dtype)
    for i in range(c):
        w[i, i] = kernel
    return ad.conv2d(x, Tensor(w, dtype=x.dtype))


def _avg_pool2(x: Tensor) -> Tensor:
    *lead, c, h, w = x.shape
    x = x[..., : h - h % 2, : w - w % 2]
    t = ad.reshape(x, (*lead, c, h // 2, 2, w // 2, 2))
    return ad.mean(ad.mean(t, axis=-1), axis=-2)


def _ssim_terms(x: Tensor, y: Tensor, kernel: np.ndarray) -> tuple[Tensor, Tensor]:
    c1, c2 = K1 ** 2, K2 ** 2
    mu_x, mu_y = _blur(x, kernel), _blur(y, kernel)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    s_xx = _blur(x * x, kernel) - mu_xx
    s_yy = _blur(y * y, kernel) - mu_yy
    s_xy = _blur(x * y, kernel) - mu_xy
    cs_map = (ad.scale(s_xy, 2.0) + c2) / (s_xx + s_yy + c2)
    lum_map = (ad.scale(mu_xy, 2.0) + c1) / (mu_xx + mu_yy + c1)
    axes = (-3, -2, -1)
    return ad.mean(lum_map * cs_map, axis=axes), ad.mean(cs_map, axis=axes)


def ms_ssim(a, b, strict: bool = False):
    """Multi-scale SSIM of [0, 1] images (C x H x W or B x C x H x W).

    Images smaller than 176 px per side use fewer scales with the exponent
    weights renormalized to sum to one, unless ``strict``. Tensor inputs give
    a differentiable Tensor (batch mean); arrays give a float.
    """
    as_float = not (isinstance(a, Tensor) or isinstance(b, Tensor))
    if as_float:
        a, b = Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    levels = msssim_levels(a.shape[-2], a.shape[-1], strict)
    weights = np.asarray(MSSSIM_WEIGHTS[:levels])
    weights = weights / weights.sum()
    kernel = gaussian_window()
    result = None
    for level in range(levels):
        ssim, cs = _ssim_terms(a, b, kernel)
        last = level == levels - 1
        term = ad.power(ad.relu(ssim if last else cs), float(weights[level]))
        result = term if result is None else result * term
        if not last:
            a, b = _avg_pool2(a), _avg_pool2(b)
    value = ad.mean(result) if result.ndim else result
    return float(value.data) if as_float else value


@dataclass
class RdPoint:
    bpp: float
    psnr_db: float
    msssim: float = float("nan")
    label: str = ""


def _prepare_curve(points: Sequence[RdPoint], attr: str) -> tuple[np.ndarray, np.ndarray]:
    if len(points) < 2:
        raise ValueError("need at least two RD points")
    bpp = np.array([p.bpp for p in points], dtype=np.float64)
    val = np.array([getattr(p, attr) for p in points], dtype=np.float64)
    uniq, inv = np.unique(bpp, return_inverse=True)
    avg = np.bincount(inv, weights=val) / np.bincount(inv)
    if uniq.size < 2:
        raise ValueError("need at least two distinct bpp values")
    return uniq, avg


def auc(points: Sequence[RdPoint], bpp_lo: float, bpp_hi: float, attr: str = "psnr_db") -> float:
    """Trapezoidal area under quality-vs-bpp on [bpp_lo, bpp_hi], divided by the width.

    Points are sorted internally and duplicate bpp values averaged.
    """
    x, y = _prepare_curve(points, attr)
    if not bpp_lo < bpp_hi:
        raise ValueError("bpp_lo must be below bpp_hi")
    if bpp_lo < x[0] - 1e-12 or bpp_hi > x[-1] + 1e-12:
        raise ValueError(f"range [{bpp_lo}, {bpp_hi}] outside the curve span [{x[0]}, {x[-1]}]")
    inside = (x > bpp_lo) & (x < bpp_hi)
    xs = np.concatenate([[bpp_lo], x[inside], [bpp_hi]])
    ys = np.interp(xs, x, y)
    return float(np.trapezoid(ys, xs) / (bpp_hi - bpp_lo))


def rd_points_csv(points: Sequence[RdPoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["label", "bpp", "psnr_db", "msssim"])
    for p in points:
        writer.writerow([p.label, repr(p.bpp), repr(p.psnr_db), repr(p.msssim)])
    return buf.getvalue()


def rd_points_json(points: Sequence[RdPoint], auc_value: float | None = None) -> str:
    return json.dumps({"points": [asdict(p) for p in points], "auc": auc_value}, indent=2)
