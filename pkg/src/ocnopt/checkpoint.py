"""Versioned binary checkpoints.

Layout (all integers little-endian):

    b"OCNO" | u32 format version | u32 manifest length | manifest (UTF-8 JSON)
    | one little-endian float64 block per array, in manifest order

The manifest is JSON with sorted keys: ``{"arrays": [{"name", "shape"}],
"meta": {...}}``.  ``meta`` holds the step counters, the generator state and
the run configuration.
"""
import json
import struct

import numpy as np

from .errors import OcnoptError

MAGIC = b"OCNO"
VERSION = 1


class CheckpointError(OcnoptError):
    pass


def _encode(arrays, meta):
    names = list(arrays)
    manifest = {"arrays": [{"name": k, "shape": list(np.shape(arrays[k]))} for k in names],
                "meta": meta}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for k in names:
        parts.append(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())
    return b"".join(parts)


def save(path, arrays, meta=None):
    """Write ``arrays`` (name -> float array, order kept) and JSON-able ``meta``."""
    data = _encode(arrays, meta or {})
    with open(path, "wb") as fh:
        fh.write(data)


def load(path):
    """Return ``(arrays, meta)`` with arrays in file order."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(data[12:12 + mlen].decode("utf-8"))
    off = 12 + mlen
    arrays = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated at array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(data[off:end], dtype="<f8").reshape(shape).astype(np.float64)
        off = end
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return arrays, manifest["meta"]
