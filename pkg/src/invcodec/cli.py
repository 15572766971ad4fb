"""Command-line interface.

Exit codes: 0 success, 1 usage or input error, 2 model / weight mismatch,
3 corrupt bitstream.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import imageio
from .autodiff import Tensor
from .codec import (BitstreamError, Bitstream, ModelMismatchError, decode_image,
                    encode_image, estimate_vs_actual, pad_image)
from .metrics import RdPoint, auc, ms_ssim, msssim_db, psnr, rd_points_csv
from .model import InvCompressModel, ModelConfig
from .rans import RansDecodeError
from .squeeze import deviation_report
from .train import MSE_PRESETS, MSSSIM_PRESETS, TrainConfig, synthetic_images, train
from .weights import WeightFileError, load_weights, save_weights

EXIT_USAGE, EXIT_MODEL, EXIT_CORRUPT = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _existing_file(value: str) -> Path:
    p = Path(value)
    if not p.is_file():
        raise argparse.ArgumentTypeError(f"file not found: {value}")
    return p


def _existing_dir(value: str) -> Path:
    p = Path(value)
    if not p.is_dir():
        raise argparse.ArgumentTypeError(f"directory not found: {value}")
    return p


def _jsonable(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_jsonable(v) for v in value]
    return value


def _emit(report: dict, fmt: str, out=None) -> None:
    out = sys.stdout if out is None else out
    if fmt == "json":
        out.write(json.dumps(_jsonable(report), indent=2) + "\n")
    elif fmt == "csv":
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(report.keys())
        writer.writerow(_jsonable(report).values())
    else:
        width = max(len(k) for k in report)
        for k, v in report.items():
            out.write(f"{k:<{width}}  {v}\n")


# -- subcommands -------------------------------------------------------------------------
def cmd_encode(args) -> int:
    model = load_weights(args.weights)
    img = imageio.read_image(args.input)
    start = time.perf_counter()
    bs = encode_image(img, model)
    data = bs.to_bytes()
    elapsed = time.perf_counter() - start
    Path(args.output).write_bytes(data)
    pixels = img.shape[1] * img.shape[2]
    _emit({
        "bpp": 8 * bs.payload_bytes / pixels,
        "total_bpp": 8 * len(data) / pixels,
        "bytes": len(data),
        "height": img.shape[1],
        "width": img.shape[2],
        "seconds": round(elapsed, 4),
    }, args.format)
    return 0


def cmd_decode(args) -> int:
    model = load_weights(args.weights)
    data = Path(args.input).read_bytes()
    start = time.perf_counter()
    img = decode_image(data, model)
    elapsed = time.perf_counter() - start
    imageio.write_image(args.output, img)
    _emit({"height": img.shape[1], "width": img.shape[2], "seconds": round(elapsed, 4)},
          args.format)
    return 0


def cmd_inspect(args) -> int:
    bs = Bitstream.from_bytes(Path(args.input).read_bytes())
    _emit(bs.header_dict(), args.format)
    return 0


def metrics_report(a: np.ndarray, b: np.ndarray) -> dict:
    if a.shape != b.shape:
        raise UsageError(f"image sizes differ: {a.shape[1:]} vs {b.shape[1:]}")
    value = min(max(ms_ssim(a, b), -1.0), 1.0)
    return {"psnr_db": psnr(a, b), "msssim": value,
            "msssim_db": msssim_db(value) if value >= 0 else 0.0}


def cmd_metrics(args) -> int:
    a, b = imageio.read_image(args.reference), imageio.read_image(args.test)
    _emit(metrics_report(a, b), args.format)
    return 0


def cmd_deviation(args) -> int:
    model = load_weights(args.weights)
    img = imageio.read_image(args.image)
    x = Tensor(pad_image(img, model.config.pad_multiple))
    report = deviation_report(model.transform(x), model.config.alpha)
    if args.map is not None:
        report.save_map_pgm(args.map)
    _emit(report.to_dict(), args.format)
    return 0


def rd_point(images: list[np.ndarray], model: InvCompressModel, label: str) -> RdPoint:
    bits = pixels = 0
    psnrs, ssims = [], []
    for img in images:
        bs = encode_image(img, model)
        rec = decode_image(bs, model)
        bits += 8 * bs.payload_bytes
        pixels += img.shape[1] * img.shape[2]
        psnrs.append(psnr(img, rec))
        ssims.append(ms_ssim(img, rec))
    return RdPoint(bpp=bits / pixels, psnr_db=float(np.mean(psnrs)),
                   msssim=float(np.mean(ssims)), label=label)


def rd_report(points: list[RdPoint]) -> dict:
    points = sorted(points, key=lambda p: p.bpp)
    value = None
    if len({p.bpp for p in points}) >= 2 and all(math.isfinite(p.psnr_db) for p in points):
        value = auc(points, points[0].bpp, points[-1].bpp)
    return {"points": [vars(p).copy() for p in points], "auc": value}


def cmd_rd(args) -> int:
    images = [imageio.read_image(p) for p in imageio.list_images(args.directory)]
    if not images:
        raise UsageError(f"no PNG/PPM images in {args.directory}")
    points = [rd_point(images, load_weights(w), w.stem) for w in args.weights]
    report = rd_report(points)
    if args.csv is not None:
        Path(args.csv).write_text(rd_points_csv([RdPoint(**p) for p in report["points"]]))
    if args.format == "csv":
        sys.stdout.write(rd_points_csv([RdPoint(**p) for p in report["points"]]))
        sys.stdout.write(f"# auc,{report['auc']}\n")
    elif args.format == "json":
        sys.stdout.write(json.dumps(_jsonable(report), indent=2) + "\n")
    else:
        for p in report["points"]:
            sys.stdout.write(f"{p['label']}: {p['bpp']:.4f} bpp  {p['psnr_db']:.3f} dB  "
                             f"MS-SSIM {p['msssim']:.5f}\n")
        sys.stdout.write(f"AUC (PSNR): {report['auc']}\n")
    return 0


def cmd_estimate(args) -> int:
    model = load_weights(args.weights)
    _emit(estimate_vs_actual(imageio.read_image(args.image), model), args.format)
    return 0


def _model_config(args) -> ModelConfig:
    if args.blocks == 2:
        kernels = (5, 5)
    elif args.blocks == 4:
        kernels = (5, 5, 3, 3)
    else:
        kernels = (5,) * args.blocks
    n = args.latent_channels
    d = 3 * 4 ** len(kernels)
    if d % n:
        raise UsageError(f"latent channel count {n} must divide {d}")
    return ModelConfig(kernels=kernels, alpha=d // n, context=args.context,
                       enhancement=not args.no_enhancement, seed=args.seed)


def cmd_init_weights(args) -> int:
    model = InvCompressModel(_model_config(args))
    save_weights(model, args.output)
    _emit({"parameters": sum(p.size for p in model.parameters()),
           "alpha": model.config.alpha, "latent_channels": model.config.latent_channels},
          args.format)
    return 0


def cmd_train_toy(args) -> int:
    if args.quality is not None:
        lmbda = (MSE_PRESETS | MSSSIM_PRESETS)[args.quality][0]
        kind = "mse" if args.quality in MSE_PRESETS else "ms-ssim"
    else:
        lmbda, kind = args.lmbda, args.distortion
    if args.images is not None:
        data = [imageio.read_image(p) for p in imageio.list_images(args.images)]
        if not data:
            raise UsageError(f"no PNG/PPM images in {args.images}")
    else:
        data = synthetic_images(args.num_images, args.crop, args.seed)
    cfg = TrainConfig(lmbda=lmbda, distortion=kind, model=_model_config(args), steps=args.steps,
                      lr=args.lr, batch_size=args.batch_size, crop=args.crop, seed=args.seed)
    result = train(data, cfg)
    save_weights(result.model, args.output)
    if args.history is not None:
        Path(args.history).write_text(result.history_csv())
    _emit({"initial_loss": result.initial["loss"], "final_loss": result.final["loss"],
           "final_bpp": result.final["bpp"], "final_distortion": result.final["distortion"]},
          args.format)
    return 0


# -- parser ------------------------------------------------------------------------------
def _add_format(p, default="text"):
    p.add_argument("--format", choices=("json", "csv", "text"), default=default,
                   help="report format (default: %(default)s)")


def _add_arch(p):
    p.add_argument("--blocks", type=int, default=2, help="invertible blocks (default: 2)")
    p.add_argument("--latent-channels", "-N", type=int, default=8,
                   help="latent channels N; alpha = 3*4^blocks / N (default: 8)")
    p.add_argument("--context", action="store_true", help="enable the autoregressive context model")
    p.add_argument("--no-enhancement", action="store_true",
                   help="omit the feature enhancement modules")
    p.add_argument("--seed", type=int, default=0, help="initialization / sampling seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="invcodec", description="Invertible-network learned image codec.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("encode", help="compress a PNG/PPM image to a .bin bitstream")
    p.add_argument("input", type=_existing_file)
    p.add_argument("weights", type=_existing_file, help=".wts weight file")
    p.add_argument("output")
    _add_format(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct an image from a .bin bitstream")
    p.add_argument("input", type=_existing_file)
    p.add_argument("weights", type=_existing_file)
    p.add_argument("output", help="output path ending in .png or .ppm")
    _add_format(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("inspect", help="print the header of a bitstream")
    p.add_argument("input", type=_existing_file)
    _add_format(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("metrics", help="PSNR and MS-SSIM between two images")
    p.add_argument("reference", type=_existing_file)
    p.add_argument("test", type=_existing_file)
    _add_format(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("deviation", help="channel-squeeze deviation report for one image")
    p.add_argument("image", type=_existing_file)
    p.add_argument("weights", type=_existing_file)
    p.add_argument("--map", help="write the scaled deviation map as an 8-bit PGM")
    _add_format(p)
    p.set_defaults(func=cmd_deviation)

    p = sub.add_parser("rd", help="RD points and AUC for a directory of images")
    p.add_argument("directory", type=_existing_dir)
    p.add_argument("weights", type=_existing_file, nargs="+", help="one .wts file per RD point")
    p.add_argument("--csv", help="also write the RD points as CSV to this path")
    _add_format(p)
    p.set_defaults(func=cmd_rd)

    p = sub.add_parser("estimate", help="compare the model's rate estimate with the coded size")
    p.add_argument("image", type=_existing_file)
    p.add_argument("weights", type=_existing_file)
    _add_format(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("init-weights", help="write randomly initialized weights")
    p.add_argument("output")
    _add_arch(p)
    _add_format(p)
    p.set_defaults(func=cmd_init_weights)

    p = sub.add_parser("train-toy", help="desk-scale rate-distortion training")
    p.add_argument("output", help="where to write the trained .wts file")
    presets = sorted(MSE_PRESETS) + sorted(MSSSIM_PRESETS)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--quality", choices=presets, help="named (lambda, distortion) preset")
    group.add_argument("--lambda", dest="lmbda", type=float, default=0.01,
                       help="rate-distortion tradeoff (default: %(default)s)")
    p.add_argument("--distortion", choices=("mse", "ms-ssim"), default="mse")
    p.add_argument("--images", type=_existing_dir, help="training images (default: synthetic)")
    p.add_argument("--num-images", type=int, default=16, help="synthetic image count")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--crop", type=int, default=32)
    p.add_argument("--history", help="write the per-step loss history as CSV")
    _add_arch(p)
    _add_format(p)
    p.set_defaults(func=cmd_train_toy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ModelMismatchError, WeightFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (BitstreamError, RansDecodeError) as exc:
        print(f"error: corrupt bitstream: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (UsageError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
