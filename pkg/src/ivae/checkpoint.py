"""Self-describing binary checkpoints.

Layout: magic ``b"IVAE1"``, a little-endian uint64 header length, a UTF-8
JSON header, then every array as contiguous little-endian float64 in header
order.  The header lists ``name``, ``shape`` and byte ``offset`` per array
plus free-form metadata (model config, schema hash, ...).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"IVAE1"


class CheckpointError(ValueError):
    pass


def save(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not an IVAE1 checkpoint")
    start = len(MAGIC) + 8
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC):start])
    header = json.loads(raw[start:start + hlen].decode())
    data = raw[start + hlen:]
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(data, dtype="<f8", count=n, offset=e["offset"])
        arrays[e["name"]] = a.reshape(tuple(e["shape"])).astype(np.float64)
    return arrays, header["meta"]


def check_compatible(meta: dict, **expected) -> None:
    for key, want in expected.items():
        got = meta.get(key)
        if got != want:
            raise CheckpointError(f"checkpoint {key} mismatch: stored {got!r}, expected {want!r}")
