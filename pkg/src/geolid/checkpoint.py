"""Self-describing named-tensor archive.

Layout: 8-byte magic, u32 header length, JSON header (tensor directory with
name/shape/dtype/offset plus a free-form meta block), raw little-endian
payload, sha256 trailer over everything before it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GLIDARC1"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


def write_archive(path, tensors: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    directory = []
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        directory.append({"name": name, "shape": list(arr.shape),
                          "dtype": arr.dtype.name, "offset": len(payload)})
        payload.extend(arr.astype(_DTYPES[arr.dtype.name]).tobytes())
    header = json.dumps({"version": 1, "meta": meta or {},
                         "tensors": directory}).encode()
    body = MAGIC + struct.pack("<I", len(header)) + header + bytes(payload)
    digest = hashlib.sha256(body).digest()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + digest)
    tmp.replace(path)
    return path


def read_archive(path):
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 + 32 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor archive")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    hlen = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])[0]
    hstart = len(MAGIC) + 4
    header = json.loads(raw[hstart:hstart + hlen].decode())
    payload = raw[hstart + hlen:-32]
    tensors = {}
    for rec in header["tensors"]:
        dt = np.dtype(_DTYPES[rec["dtype"]])
        count = int(np.prod(rec["shape"])) if rec["shape"] else 1
        arr = np.frombuffer(payload, dtype=dt, count=count,
                            offset=rec["offset"]).reshape(rec["shape"])
        tensors[rec["name"]] = arr.astype(rec["dtype"])
    return tensors, header["meta"]


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
