"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"CARFIELD"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length N
    20      N     UTF-8 JSON header, keys sorted, no whitespace
    20+N    pad   zero bytes up to the next multiple of 8
    ...           tensor data, each tensor C-order little-endian, 8-byte aligned

The header holds ``config`` (model config), ``config_hash`` (sha256 of the
canonical config JSON), ``metadata`` (free-form JSON) and ``tensors``: a list
of ``{name, dtype, shape, offset, nbytes}`` with offsets relative to the start
of the data section.  Writing is deterministic: equal models produce equal
bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from carfield.errors import DataError
from carfield.model import CarModel, ModelConfig

MAGIC = b"CARFIELD"
VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


def _align(n: int) -> int:
    return (n + 7) // 8 * 8


def save_checkpoint(path: str | os.PathLike, model: CarModel, metadata: dict | None = None) -> Path:
    path = Path(path)
    entries, blobs = [], []
    offset = 0
    for name, t in model.tensors().items():
        arr = t.detach().cpu().contiguous().numpy()
        dt = _DTYPES[t.dtype]
        raw = arr.astype(dt, copy=False).tobytes(order="C")
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        pad = _align(len(raw)) - len(raw)
        blobs.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    header = {
        "config": model.config.model_dump(mode="json"),
        "config_hash": model.config.digest(),
        "metadata": metadata or {},
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(hbytes)))
        f.write(hbytes)
        f.write(b"\0" * (_align(20 + len(hbytes)) - 20 - len(hbytes)))
        f.writelines(blobs)
    os.replace(tmp, path)
    return path


def read_header(path: str | os.PathLike) -> tuple[dict, int]:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise DataError(f"{path}: not a carfield checkpoint")
        version, n = struct.unpack("<IQ", f.read(12))
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(n).decode())
    return header, _align(20 + n)


def load_checkpoint(path: str | os.PathLike) -> tuple[CarModel, dict]:
    """Load a model; returns ``(model, metadata)``."""
    header, data_start = read_header(path)
    config = ModelConfig.model_validate(header["config"])
    if config.digest() != header["config_hash"]:
        raise DataError(f"{path}: config hash mismatch")
    raw = Path(path).read_bytes()
    tensors = {}
    dtype = torch.float32
    for e in header["tensors"]:
        start = data_start + e["offset"]
        arr = np.frombuffer(raw, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)), offset=start)
        t = torch.from_numpy(arr.reshape(e["shape"]).copy())
        tensors[e["name"]] = t
        if e["name"].startswith("field."):
            dtype = t.dtype
    model = CarModel(config, dtype=dtype)
    model.load_tensors(tensors)
    return model, header.get("metadata", {})
