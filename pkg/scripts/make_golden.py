"""Regenerate the golden codec fixture in tests/fixtures.

Writes a 64x64 test image, seed-0 toy weights and the bitstream the codec
produces for them. Only rerun this when the format or model changes on
purpose; the determinism test compares fresh encodes against these files.
"""
import argparse
from pathlib import Path

import numpy as np

from invcodec import imageio
from invcodec.codec import encode_image
from invcodec.model import InvCompressModel, ModelConfig
from invcodec.train import synthetic_images
from invcodec.weights import save_weights


def golden_image() -> np.ndarray:
    base = synthetic_images(1, 64, seed=2024)[0]
    grain = np.random.default_rng(2024).uniform(-0.08, 0.08, base.shape)
    return np.clip(base + grain, 0.0, 1.0)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=Path(__file__).resolve().parents[1] / "tests" / "fixtures",
                    type=Path)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    imageio.write_image(args.out / "golden.png", golden_image())
    model = InvCompressModel(ModelConfig.toy(seed=0))
    save_weights(model, args.out / "golden.wts")
    img = imageio.read_image(args.out / "golden.png")
    (args.out / "golden.bin").write_bytes(encode_image(img, model).to_bytes())
    print("wrote", *sorted(p.name for p in args.out.iterdir() if p.stem == "golden"))


if __name__ == "__main__":
    main()
