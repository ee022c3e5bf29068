"""Binary weight container.

Layout (little-endian)::

    b"MIATTN1\\0"
    u32 format version
    u32 metadata length, then UTF-8 JSON metadata (sorted keys)
    u32 tensor count
    per tensor: u16 name length, name, u8 dtype code, u8 rank, u32 dims..., raw data
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

from miattn import __version__
from miattn.descriptors import DESCRIPTOR_NAMES, SCHEMA_VERSION, ScalerParams
from miattn.errors import DataError
from miattn.featurize import SYMBOL_VOCABULARY, VOCABULARY_VERSION
from miattn.model import ModelConfig, MultiInputModel

MAGIC = b"MIATTN1\0"
FORMAT_VERSION = 1

_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("<i4"), 4: np.dtype("u1")}
_CODES = {dt: code for code, dt in _DTYPES.items()}


class ContainerError(DataError):
    pass


class BadMagic(ContainerError):
    pass


class VersionUnsupported(ContainerError):
    pass


class ChecksumMismatch(ContainerError):
    pass


def _scaler_tensors(s: ScalerParams) -> dict[str, np.ndarray]:
    return {"scaler.mean": s.mean, "scaler.std": s.std, "scaler.mask": s.mask.astype(np.uint8)}


def encode(metadata: dict, tensors: dict[str, np.ndarray]) -> bytes:
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = np.dtype(arr.dtype.kind + str(arr.dtype.itemsize)).newbyteorder("<")
        if dt not in _CODES:
            raise ContainerError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        if dt.kind == "f" and not np.all(np.isfinite(arr)):
            raise ContainerError(f"tensor {name!r} contains non-finite values")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<BB{arr.ndim}I", _CODES[dt], arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:len(MAGIC)] != MAGIC:
        if len(data) < len(MAGIC) and MAGIC.startswith(data):
            raise ChecksumMismatch("file truncated inside the header")
        raise BadMagic("not a miattn weight file")
    if len(data) < len(MAGIC) + 4:
        raise ChecksumMismatch("file truncated inside the header")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"container version {version} is not supported (expected {FORMAT_VERSION})")
    if len(data) < len(MAGIC) + 16:
        raise ChecksumMismatch("file truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch("CRC32 mismatch: file is truncated or corrupted")

    pos = len(MAGIC) + 4
    (meta_len,) = struct.unpack_from("<I", body, pos)
    pos += 4
    metadata = json.loads(body[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + name_len].decode("utf-8")
        pos += name_len
        code, rank = struct.unpack_from("<BB", body, pos)
        pos += 2
        dims = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        dt = _DTYPES.get(code)
        if dt is None:
            raise ContainerError(f"tensor {name!r}: unknown dtype code {code}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(body):
        raise ContainerError("trailing bytes after the last tensor")
    return metadata, tensors


def model_metadata(model: MultiInputModel) -> dict:
    meta = {
        "format": "miattn-model",
        "tool_version": __version__,
        "config": model.config.to_dict(),
        "threshold": model.config.threshold,
        "seed": model.config.seed,
        "descriptor_schema": {"version": SCHEMA_VERSION, "names": list(DESCRIPTOR_NAMES)},
        "vocabulary": {"version": VOCABULARY_VERSION, "symbols": list(SYMBOL_VOCABULARY)},
        "scaler": None if model.scaler is None else {"schema_version": model.scaler.schema_version},
    }
    return meta


def model_to_bytes(model: MultiInputModel, extra: dict | None = None) -> bytes:
    meta = model_metadata(model)
    if extra:
        meta["extra"] = extra
    tensors = model.state_dict()
    if model.scaler is not None:
        tensors.update(_scaler_tensors(model.scaler))
    return encode(meta, tensors)


def model_from_bytes(data: bytes) -> MultiInputModel:
    meta, tensors = decode(data)
    if meta.get("format") != "miattn-model":
        raise ContainerError("container does not hold a miattn model")
    if meta["descriptor_schema"]["version"] != SCHEMA_VERSION:
        raise ContainerError(f"descriptor schema {meta['descriptor_schema']['version']!r} is not {SCHEMA_VERSION!r}")
    if meta["vocabulary"]["version"] != VOCABULARY_VERSION:
        raise ContainerError(f"symbol vocabulary {meta['vocabulary']['version']!r} is not {VOCABULARY_VERSION!r}")
    scaler = None
    if meta.get("scaler") is not None:
        scaler = ScalerParams(
            mean=tensors.pop("scaler.mean"),
            std=tensors.pop("scaler.std"),
            mask=tensors.pop("scaler.mask").astype(bool),
            schema_version=meta["scaler"]["schema_version"],
        )
    model = MultiInputModel(ModelConfig.from_dict(meta["config"]), scaler)
    model.load_state_dict(tensors)
    model.metadata = meta
    return model


def save_model(model: MultiInputModel, path, extra: dict | None = None) -> None:
    data = model_to_bytes(model, extra)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_model(path) -> MultiInputModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
