"""Binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"STMKCKPT"
    8       2     format version (uint16, currently 1)
    10      4     header length H in bytes (uint32)
    14      H     UTF-8 JSON header
    14+H    ...   float64 little-endian payload

The JSON header always has ``"arrays"``: a list of ``{"name", "shape", "offset"}``
where ``offset`` counts float64 elements into the payload, plus free-form
metadata (model kind, configs, optimizer step). Arrays are stored C-order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"STMKCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, meta: dict, arrays: dict) -> None:
    entries = []
    offset = 0
    flat = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        flat.append(a.ravel())
    header = dict(meta)
    header["arrays"] = entries
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.concatenate(flat) if flat else np.zeros(0, dtype="<f8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(blob)))
        f.write(blob)
        f.write(payload.astype("<f8").tobytes())


def load_checkpoint(path):
    """Return ``(meta, arrays)``; arrays are writable float64 copies."""
    data = Path(path).read_bytes()
    if len(data) < 14 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<HI", data[8:14])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if 14 + hlen > len(data):
        raise CheckpointError(f"{path}: truncated header")
    meta = json.loads(data[14:14 + hlen].decode("utf-8"))
    body = data[14 + hlen:]
    if len(body) % 8:
        raise CheckpointError(f"{path}: payload is not a whole number of float64 values")
    payload = np.frombuffer(body, dtype="<f8")
    arrays = {}
    for e in meta.pop("arrays"):
        size = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + size > payload.size:
            raise CheckpointError(f"{path}: array {e['name']!r} runs past the payload")
        arrays[e["name"]] = payload[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    return meta, arrays
