"""ODRE binary containers for embeddings and model checkpoints.

Embedding file (little-endian)::

    b"ODRE" | u16 version=1 | u32 rows | u32 cols | rows*cols float32, row-major

Checkpoint file: the same magic, then ``u16 0x8001`` (high bit marks a
checkpoint), ``u32`` manifest length, a UTF-8 JSON manifest listing every
tensor's name, shape, byte offset and byte length, and finally the raw
float64 payload. Offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import PARAM_NAMES, ModelParams

MAGIC = b"ODRE"
EMBEDDING_VERSION = 1
CHECKPOINT_VERSION = 0x8001
_EMB_HEADER = struct.Struct("<4sHII")
_CKPT_HEADER = struct.Struct("<4sHI")


class FormatError(ValueError):
    """Corrupt or foreign ODRE file."""


def encode_embedding(array: np.ndarray) -> bytes:
    a = np.asarray(array)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"embedding must be a nonempty 2-D array, got shape {a.shape}")
    a = a.astype("<f4", copy=False)
    if not np.all(np.isfinite(a)):
        raise ValueError("embedding contains non-finite values")
    return _EMB_HEADER.pack(MAGIC, EMBEDDING_VERSION, a.shape[0], a.shape[1]) + np.ascontiguousarray(a).tobytes()


def decode_embedding(blob: bytes) -> np.ndarray:
    if len(blob) < _EMB_HEADER.size:
        raise FormatError("truncated ODRE header")
    magic, version, rows, cols = _EMB_HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != EMBEDDING_VERSION:
        raise FormatError(f"unsupported embedding version {version}")
    if rows < 1 or cols < 1:
        raise FormatError(f"invalid embedding shape {rows}x{cols}")
    expected = _EMB_HEADER.size + rows * cols * 4
    if len(blob) != expected:
        raise FormatError(f"expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=_EMB_HEADER.size).reshape(rows, cols)
    if not np.all(np.isfinite(data)):
        raise FormatError("embedding contains non-finite values")
    return data.astype(np.float32)


def write_embedding(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_embedding(array))


def read_embedding(path: str | Path) -> np.ndarray:
    return decode_embedding(Path(path).read_bytes())


def embedding_path(directory: str | Path, record_id: str, modality: str) -> Path:
    if modality not in ("txt", "img"):
        raise ValueError(f"modality must be 'txt' or 'img', got {modality!r}")
    return Path(directory) / f"{record_id}.{modality}.odre"


def encode_checkpoint(params: ModelParams, meta: dict | None = None) -> bytes:
    tensors = []
    payload = bytearray()
    for name in PARAM_NAMES:
        arr = np.ascontiguousarray(getattr(params, name), dtype="<f8")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": len(payload), "nbytes": arr.nbytes})
        payload += arr.tobytes()
    manifest = {
        "dtype": "<f8",
        "n_heads": params.n_heads,
        "tensors": tensors,
        "meta": meta or {},
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _CKPT_HEADER.pack(MAGIC, CHECKPOINT_VERSION, len(mbytes)) + mbytes + bytes(payload)


def decode_checkpoint(blob: bytes) -> tuple[ModelParams, dict]:
    if len(blob) < _CKPT_HEADER.size:
        raise FormatError("truncated checkpoint header")
    magic, version, mlen = _CKPT_HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version:#x}")
    start = _CKPT_HEADER.size
    try:
        manifest = json.loads(blob[start:start + mlen].decode("utf-8"))
        payload = blob[start + mlen:]
        arrays = {}
        for t in manifest["tensors"]:
            off, nbytes, shape = int(t["offset"]), int(t["nbytes"]), tuple(t["shape"])
            if off + nbytes > len(payload) or int(np.prod(shape)) * 8 != nbytes:
                raise FormatError(f"tensor {t['name']} exceeds payload or mismatches its shape")
            arrays[t["name"]] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).astype(np.float64)
        if sum(int(t["nbytes"]) for t in manifest["tensors"]) != len(payload):
            raise FormatError("checkpoint payload length disagrees with its manifest")
        missing = set(PARAM_NAMES) - arrays.keys()
        if missing:
            raise FormatError(f"checkpoint lacks tensors {sorted(missing)}")
        params = ModelParams(**{k: arrays[k] for k in PARAM_NAMES}, n_heads=int(manifest["n_heads"]))
    except FormatError:
        raise
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    return params, manifest.get("meta", {})


def write_checkpoint(path: str | Path, params: ModelParams, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, meta))


def read_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    return decode_checkpoint(Path(path).read_bytes())
