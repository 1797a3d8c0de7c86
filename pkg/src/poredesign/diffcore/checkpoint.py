"""PVK1 checkpoints.

Layout: ``b"PVK1"``, a little-endian u64 manifest length, the UTF-8 JSON
manifest ``{"header": {...}, "params": [{name, shape, dtype, offset}]}``,
then one blob of little-endian float64 values in manifest order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..fileio import atomic_write_bytes

MAGIC = b"PVK1"


def encode_checkpoint(params: dict[str, np.ndarray], header: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in params.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "<f8", "offset": offset})
        chunks.append(data)
        offset += len(data)
    manifest = json.dumps({"header": header or {}, "params": entries}, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(manifest)) + manifest + b"".join(chunks)


def decode_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError("not a PVK1 checkpoint")
    (n,) = struct.unpack_from("<Q", data, 4)
    if 12 + n > len(data):
        raise FormatError("truncated PVK1 manifest")
    try:
        manifest = json.loads(data[12 : 12 + n])
    except ValueError as exc:
        raise FormatError(f"bad PVK1 manifest: {exc}") from exc
    blob = data[12 + n :]
    params = {}
    for e in manifest["params"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 8 * count
        if end > len(blob):
            raise FormatError(f"truncated PVK1 blob at {e['name']}")
        params[e["name"]] = np.frombuffer(blob[e["offset"] : end], dtype="<f8").reshape(e["shape"]).copy()
    return manifest["header"], params


def save_checkpoint(path, params: dict[str, np.ndarray], header: dict | None = None) -> None:
    atomic_write_bytes(Path(path), encode_checkpoint(params, header))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
