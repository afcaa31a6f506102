"""Versioned binary checkpoints: header + raw little-endian float32 blobs.

Layout:
    bytes 0-3   magic b"MGLB"
    bytes 4-7   format version, uint32 LE
    bytes 8-11  header length, uint32 LE
    header      UTF-8 JSON: {"params": [[name, shape], ...], "meta": {...}}
    blobs       concatenated raw '<f4' data in header order

Save/load round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"MGLB"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_params(path, named: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    for name in sorted(named):
        arr = named[name]
        if arr.dtype != np.float32:
            raise TypeError(f"checkpoints store float32 parameters; {name} is {arr.dtype}")
        entries.append([name, list(arr.shape)])
        blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = json.dumps({"params": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r} in {path}")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(header_len).decode())
        named = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            data = f.read(4 * count)
            if len(data) != 4 * count:
                raise CheckpointError(f"truncated blob for {name}")
            named[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return named, header["meta"]


def params_digest(named: dict[str, np.ndarray]) -> str:
    """Stable SHA-256 over names, shapes, and raw bytes; used for freeze checks."""
    h = hashlib.sha256()
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
