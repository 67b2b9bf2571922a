"""Binary model checkpoints.

Layout: 8-byte magic ``DPACKPT\\0``, little-endian u32 format version,
u32 descriptor length, a UTF-8 JSON descriptor (layer sizes plus free-form
metadata), then the flat parameter vector as little-endian float64.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..autodiff import ModelParams
from ..errors import FormatError

MAGIC = b"DPACKPT\0"
VERSION = 1
_HEAD = struct.Struct("<8sII")


def save_checkpoint(path, model: ModelParams, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    desc = json.dumps({"sizes": model.sizes, "meta": meta or {}}, sort_keys=True).encode()
    payload = model.flatten().astype("<f8").tobytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(desc)))
        fh.write(desc)
        fh.write(payload)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEAD.size:
        raise FormatError(f"{path}: truncated checkpoint header", offset=len(blob))
    magic, version, n = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)", offset=0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=8)
    start = _HEAD.size
    if len(blob) < start + n:
        raise FormatError(f"{path}: truncated descriptor", offset=len(blob))
    try:
        desc = json.loads(blob[start : start + n])
        sizes = [int(s) for s in desc["sizes"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed descriptor ({exc})", offset=start) from exc
    dim = sum(a * b + b for a, b in zip(sizes, sizes[1:]))
    body = blob[start + n :]
    if len(body) != 8 * dim:
        raise FormatError(f"{path}: expected {8 * dim} payload bytes, found {len(body)}",
                          offset=start + n)
    vec = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return ModelParams.from_flat(sizes, vec), desc.get("meta", {})
