"""End-to-end image encoder/decoder and the bitstream container.

Bitstream layout (integers little-endian)::

    offset size field
    0      4    magic b"IENC"
    4      1    format version (1)
    5      8    model hash
    13     4    image height (before padding)
    17     4    image width (before padding)
    21     2    alpha
    23     2    latent channels N
    25     1    flags (bit 0: context model)
    26     4    z payload length Z
    30     4    CRC-32 of bytes 0..29
    34     Z    z payload (rANS)
    34+Z   ...  y payload (rANS)

Symbols are coded channel-major (c, i, j) for z; for y they are coded
channel-major in hyperprior mode and position-major (i, j, c) in context
mode, matching the serial decode order.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, round_half_away
from .entropy import CdfTable, split_mean_scale, uniform_table
from .model import CODING_PRECISION, InvCompressModel
from .rans import RansDecodeError, RansDecoder, RansEncoder
from .weights import model_hash

MAGIC = b"IENC"
VERSION = 1
_HEADER = struct.Struct("<4sB8sIIHHBI")
HEADER_BYTES = _HEADER.size + 4
FLAG_CONTEXT = 1

_NIBBLE = uniform_table(16)


class BitstreamError(ValueError):
    """Malformed or corrupted container or payload."""


class ModelMismatchError(ValueError):
    """The bitstream was produced with different weights or architecture."""


@dataclass
class Bitstream:
    model_hash: bytes
    height: int
    width: int
    alpha: int
    latent_channels: int
    context: bool
    z_payload: bytes
    y_payload: bytes
    version: int = VERSION

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(
            MAGIC, self.version, self.model_hash, self.height, self.width, self.alpha,
            self.latent_channels, FLAG_CONTEXT if self.context else 0, len(self.z_payload),
        )
        return head + struct.pack("<I", zlib.crc32(head)) + self.z_payload + self.y_payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_BYTES:
            raise BitstreamError(f"stream of {len(data)} bytes is shorter than the header")
        fields = _HEADER.unpack_from(data)
        magic, version, mhash, h, w, alpha, n, flags, zlen = fields
        if magic != MAGIC:
            raise BitstreamError("bad magic")
        (crc,) = struct.unpack_from("<I", data, _HEADER.size)
        if crc != zlib.crc32(data[:_HEADER.size]):
            raise BitstreamError("header checksum mismatch")
        if version != VERSION:
            raise BitstreamError(f"unsupported bitstream version {version}")
        if flags & ~FLAG_CONTEXT:
            raise BitstreamError(f"unknown flags {flags:#x}")
        if HEADER_BYTES + zlen > len(data):
            raise BitstreamError("z payload length exceeds stream size")
        body = data[HEADER_BYTES:]
        return cls(mhash, h, w, alpha, n, bool(flags & FLAG_CONTEXT), body[:zlen], body[zlen:],
                   version)

    @property
    def payload_bytes(self) -> int:
        return len(self.z_payload) + len(self.y_payload)

    def header_dict(self) -> dict:
        return {
            "version": self.version,
            "model_hash": self.model_hash.hex(),
            "height": self.height,
            "width": self.width,
            "alpha": self.alpha,
            "latent_channels": self.latent_channels,
            "context": self.context,
            "z_payload_bytes": len(self.z_payload),
            "y_payload_bytes": len(self.y_payload),
            "total_bytes": HEADER_BYTES + self.payload_bytes,
        }


@dataclass
class LatentPair:
    y_hat: np.ndarray
    z_hat: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray


# -- escape-aware symbol coding -----------------------------------------------------------
def _push(enc: RansEncoder, value: int, table: CdfTable) -> None:
    idx = table.index_of(value)
    if idx is not None:
        enc.encode(idx, table)
        return
    if not table.escape:
        raise ValueError(f"value {value} outside table support and no escape bin")
    enc.encode(table.escape_index, table)
    u = 2 * value if value >= 0 else -2 * value - 1
    nibbles = []
    while True:
        nibbles.append(u & 15)
        u >>= 4
        if not u:
            break
    extra = len(nibbles) - 1
    while extra >= 15:
        enc.encode(15, _NIBBLE)
        extra -= 15
    enc.encode(extra, _NIBBLE)
    for nib in nibbles:
        enc.encode(nib, _NIBBLE)


def _pop(dec: RansDecoder, table: CdfTable) -> int:
    idx = dec.decode(table)
    if idx != table.escape_index:
        return idx + table.offset
    count = 1
    while True:
        step = dec.decode(_NIBBLE)
        count += step
        if step < 15:
            break
    u = 0
    for k in range(count):
        u |= dec.decode(_NIBBLE) << (4 * k)
    value = u >> 1 if u % 2 == 0 else -((u + 1) >> 1)
    if table.index_of(value) is not None:
        raise RansDecodeError("escaped value lies inside the regular support")
    return value


# -- helpers -------------------------------------------------------------------------------
def pad_image(img: np.ndarray, multiple: int) -> np.ndarray:
    """Reflect-pad bottom/right to a multiple of ``multiple``."""
    _, H, W = img.shape
    ph, pw = (-H) % multiple, (-W) % multiple
    if not ph and not pw:
        return img
    mode = "reflect" if min(H, W) > 1 else "edge"
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode=mode)


def _check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a 3 x H x W image, got shape {img.shape}")
    if img.shape[1] < 1 or img.shape[2] < 1:
        raise ValueError("image must be at least 1x1")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite pixels")
    return img


def _gaussian_params(model: InvCompressModel, hyper: np.ndarray):
    mu, sigma = split_mean_scale(Tensor(hyper))
    return mu.data, sigma.data


# -- encode / decode -----------------------------------------------------------------------
def compress(img, model: InvCompressModel) -> tuple[Bitstream, LatentPair]:
    img = _check_image(img)
    _, H, W = img.shape
    cfg = model.config
    x = Tensor(pad_image(img, cfg.pad_multiple))
    y = model.analysis(x).data
    z_hat = round_half_away(model.hyper_analysis(Tensor(y)).data).astype(np.float32)

    z_tables = model.prior.tables(CODING_PRECISION)
    enc = RansEncoder()
    for c in range(z_hat.shape[0]):
        for value in z_hat[c].ravel().tolist():
            _push(enc, int(value), z_tables[c])
    z_payload = enc.flush()

    n, h, w = y.shape
    hyper = model.hyper_out(Tensor(z_hat), (h, w)).data
    gauss = model.gaussian
    enc = RansEncoder()
    if model.context_model is None:
        mu, sigma = _gaussian_params(model, hyper)
        symbols = round_half_away(y - mu).astype(np.float32)
        y_hat = symbols + mu
        indexes = gauss.scale_index(sigma)
        for s, k in zip(symbols.ravel().tolist(), indexes.ravel().tolist()):
            _push(enc, int(s), gauss.table(k))
    else:
        y_hat = np.zeros_like(y)
        mu = np.zeros_like(y)
        sigma = np.zeros_like(y)
        for i in range(h):
            for j in range(w):
                m, s = model.context_model.predict_at(y_hat, hyper, i, j)
                sym = round_half_away(y[:, i, j] - m).astype(np.float32)
                y_hat[:, i, j] = sym + m
                mu[:, i, j], sigma[:, i, j] = m, s
                for value, k in zip(sym.tolist(), gauss.scale_index(s).tolist()):
                    _push(enc, int(value), gauss.table(k))
    y_payload = enc.flush()

    bs = Bitstream(model_hash(model), H, W, cfg.alpha, cfg.latent_channels,
                   model.context_model is not None, z_payload, y_payload)
    return bs, LatentPair(y_hat, z_hat, mu, sigma)


def encode_image(img, model: InvCompressModel) -> Bitstream:
    return compress(img, model)[0]


def _latent_shapes(model: InvCompressModel, H: int, W: int):
    m = model.config.pad_multiple
    h, w = _ceil_div(H, m), _ceil_div(W, m)
    return (h, w), (_ceil_div(_ceil_div(h, 2), 2), _ceil_div(_ceil_div(w, 2), 2))


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def decompress_latents(bs: Bitstream | bytes, model: InvCompressModel) -> LatentPair:
    if isinstance(bs, (bytes, bytearray)):
        bs = Bitstream.from_bytes(bytes(bs))
    cfg = model.config
    if bs.model_hash != model_hash(model):
        raise ModelMismatchError(
            f"bitstream model hash {bs.model_hash.hex()} != weights {model_hash(model).hex()}"
        )
    if (bs.alpha, bs.latent_channels, bs.context) != (
        cfg.alpha, cfg.latent_channels, model.context_model is not None
    ):
        raise ModelMismatchError("bitstream architecture fields do not match the model")
    (h, w), (zh, zw) = _latent_shapes(model, bs.height, bs.width)
    n, nz = cfg.latent_channels, cfg.side

    z_tables = model.prior.tables(CODING_PRECISION)
    dec = RansDecoder(bs.z_payload)
    z_hat = np.zeros((nz, zh, zw), np.float32)
    for c in range(nz):
        z_hat[c] = np.array([_pop(dec, z_tables[c]) for _ in range(zh * zw)],
                            np.float32).reshape(zh, zw)
    dec.finish()

    hyper = model.hyper_out(Tensor(z_hat), (h, w)).data
    gauss = model.gaussian
    dec = RansDecoder(bs.y_payload)
    if model.context_model is None:
        mu, sigma = _gaussian_params(model, hyper)
        indexes = gauss.scale_index(sigma).ravel().tolist()
        symbols = np.array([_pop(dec, gauss.table(k)) for k in indexes], np.float32)
        y_hat = symbols.reshape(mu.shape) + mu
    else:
        y_hat = np.zeros((n, h, w), np.float32)
        mu = np.zeros_like(y_hat)
        sigma = np.zeros_like(y_hat)
        for i in range(h):
            for j in range(w):
                m, s = model.context_model.predict_at(y_hat, hyper, i, j)
                sym = np.array([_pop(dec, gauss.table(k)) for k in gauss.scale_index(s).tolist()],
                               np.float32)
                y_hat[:, i, j] = sym + m
                mu[:, i, j], sigma[:, i, j] = m, s
    dec.finish()
    return LatentPair(y_hat, z_hat, mu, sigma)


def decode_image(bs: Bitstream | bytes, model: InvCompressModel) -> np.ndarray:
    if isinstance(bs, (bytes, bytearray)):
        bs = Bitstream.from_bytes(bytes(bs))
    latents = decompress_latents(bs, model)
    x_hat = model.synthesis(Tensor(latents.y_hat)).data
    return np.clip(x_hat[:, :bs.height, :bs.width], 0.0, 1.0)


def estimate_vs_actual(img, model: InvCompressModel) -> dict:
    """Model rate estimate on the quantized latents vs the coded size."""
    img = _check_image(img)
    bs, lat = compress(img, model)
    pixels = img.shape[1] * img.shape[2]
    lik_y = model.gaussian.likelihood(lat.y_hat, lat.mu, lat.sigma).data
    lik_z = model.prior.likelihood(Tensor(lat.z_hat)).data
    bits = float(-np.log2(lik_y.astype(np.float64)).sum() - np.log2(lik_z.astype(np.float64)).sum())
    total = len(bs.to_bytes())
    return {
        "estimated_bpp": bits / pixels,
        "actual_bpp": total * 8 / pixels,
        "payload_bpp": bs.payload_bytes * 8 / pixels,
        "total_bytes": total,
        "pixels": pixels,
    }
