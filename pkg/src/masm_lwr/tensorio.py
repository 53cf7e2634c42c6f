"""Binary tensor container used for model checkpoints and vector stores.

Layout (all integers little-endian):

    magic          4 bytes  (b"MASM" for checkpoints, b"MAVS" for stores)
    format version u32
    header length  u32
    header         UTF-8 JSON: arbitrary metadata plus an ordered tensor
                   manifest [{name, shape, dtype, offset}, ...]; offsets are
                   relative to the start of the blob section
    blobs          raw IEEE-754 tensor data, manifest order

The header JSON is serialized with sorted keys and no whitespace so that
identical inputs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8", "int32": "<i4", "int64": "<i8"}


class ContainerError(Exception):
    """Raised on malformed or mismatched container files."""


def write_container(path, magic: bytes, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write tensors with metadata; `tensors` insertion order fixes blob order."""
    if len(magic) != 4:
        raise ContainerError(f"magic must be 4 bytes, got {magic!r}")
    manifest = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ContainerError(f"unsupported dtype {dtype} for tensor {name}")
        blob = np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset}
        )
        offset += len(blob)
        blobs.append(blob)
    header = dict(meta)
    header["manifest"] = manifest
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back (meta, tensors); inverse of :func:`write_container`."""
    with open(path, "rb") as f:
        got = f.read(4)
        if got != magic:
            raise ContainerError(f"bad magic: expected {magic!r}, got {got!r}")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != FORMAT_VERSION:
            raise ContainerError(f"unsupported format version {version}")
        meta = json.loads(f.read(header_len).decode("utf-8"))
        body = f.read()
    tensors: dict[str, np.ndarray] = {}
    for entry in meta.pop("manifest"):
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(body, dtype=dt, count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
    return meta, tensors


def file_fingerprint(path) -> str:
    """SHA-256 hex digest of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
