"""Model weight files (``.wts``).

Layout (all integers little-endian)::

    4 bytes   magic b"IENW"
    1 byte    format version (1)
    4 bytes   header length L
    L bytes   UTF-8 JSON header: {"format", "config", "model_hash", "tensors": [
                  {"name", "shape", "offset"}, ...]}  (offset in bytes into the data block)
    ...       tensor data, float32 little-endian, row-major, concatenated
    32 bytes  SHA-256 of every preceding byte

The 8-byte model hash stored in bitstreams is the first 8 bytes of a
SHA-256 over the canonical config JSON and every tensor's name, shape and
data, so it does not depend on the file encoding.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import InvCompressModel, ModelConfig

MAGIC = b"IENW"
VERSION = 1
FORMAT_TAG = "invcodec-weights"


class WeightFileError(ValueError):
    pass


def model_hash(model: InvCompressModel) -> bytes:
    h = hashlib.sha256()
    h.update(json.dumps(model.config.to_dict(), sort_keys=True).encode())
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(struct.pack(f"<{p.ndim}I", *p.shape))
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return h.digest()[:8]


def to_bytes(model: InvCompressModel) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, p in model.named_parameters():
        blob = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {
            "format": FORMAT_TAG,
            "config": model.config.to_dict(),
            "model_hash": model_hash(model).hex(),
            "tensors": entries,
        },
        sort_keys=True,
    ).encode()
    body = MAGIC + struct.pack("<BI", VERSION, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes) -> InvCompressModel:
    if len(data) < 41 or data[:4] != MAGIC:
        raise WeightFileError("not a weight file (bad magic)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise WeightFileError("weight file checksum mismatch")
    version, hlen = struct.unpack_from("<BI", body, 4)
    if version != VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    header = json.loads(body[9:9 + hlen])
    if header.get("format") != FORMAT_TAG:
        raise WeightFileError(f"unexpected format tag {header.get('format')!r}")
    config = ModelConfig.from_dict(header["config"])
    model = InvCompressModel(config)
    base = 9 + hlen
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=base + entry["offset"])
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    model.load_state_dict(state)
    if model_hash(model).hex() != header["model_hash"]:
        raise WeightFileError("model hash in header does not match the tensors")
    return model


def save_weights(model: InvCompressModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load_weights(path) -> InvCompressModel:
    return from_bytes(Path(path).read_bytes())
