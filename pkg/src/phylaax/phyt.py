"""PHYT tensor container and the single-file named-tensor archive built on it.

Container layout (all little-endian)::

    b"PHYT" | u32 version=1 | u32 dtype=0 (f64) | u32 ndim | ndim x u64 extents | payload

An archive is a text manifest followed by concatenated PHYT blobs::

    PHYA 1\\n
    @key\\tvalue\\n          (metadata, optional, repeated)
    name\\toffset\\n         (offset relative to first blob byte)
    \\n
    <blobs>
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PHYT"
VERSION = 1
DTYPE_F64 = 0
ARCHIVE_MAGIC = "PHYA 1"


class FormatError(ValueError):
    pass


def encode(arr) -> bytes:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    a = np.asarray(arr, dtype="<f8").copy(order="C")
    head = MAGIC + struct.pack("<III", VERSION, DTYPE_F64, a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one container at ``offset``; returns (array, offset past it)."""
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError("bad magic, not a PHYT container")
    version, dtype, ndim = struct.unpack_from("<III", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported PHYT version {version}")
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported dtype code {dtype}")
    pos = offset + 16
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    nbytes = 8 * count
    if len(buf) < pos + nbytes:
        raise FormatError("truncated PHYT payload")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape)
    return arr.astype(np.float64), pos + nbytes


def save(path, arr) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    arr, _ = decode(Path(path).read_bytes())
    return arr


def save_archive(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    blobs = io.BytesIO()
    lines = [ARCHIVE_MAGIC]
    for key, value in (meta or {}).items():
        lines.append(f"@{key}\t{value}")
    for name, arr in tensors.items():
        if "\t" in name or "\n" in name:
            raise ValueError(f"invalid tensor name {name!r}")
        lines.append(f"{name}\t{blobs.tell()}")
        blobs.write(encode(arr))
    data = ("\n".join(lines) + "\n\n").encode() + blobs.getvalue()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\n\n")
    if end < 0:
        raise FormatError("archive manifest not terminated")
    lines = raw[:end].decode().split("\n")
    if lines[0] != ARCHIVE_MAGIC:
        raise FormatError("not a PHYA archive")
    base = end + 2
    meta, tensors = {}, {}
    for line in lines[1:]:
        key, value = line.split("\t", 1)
        if key.startswith("@"):
            meta[key[1:]] = value
        else:
            tensors[key], _ = decode(raw, base + int(value))
    return tensors, meta
