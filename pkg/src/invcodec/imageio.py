"""PNG / PPM image reading and writing as 3 x H x W float32 arrays in [0, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

SUFFIXES = {".png": "PNG", ".ppm": "PPM", ".pnm": "PPM"}


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    fmt = SUFFIXES.get(path.suffix.lower())
    if fmt is None:
        raise ValueError(f"unsupported image extension {path.suffix!r} (use .png or .ppm)")
    Image.fromarray(to_uint8(img), "RGB").save(path, format=fmt)


def list_images(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in SUFFIXES)
