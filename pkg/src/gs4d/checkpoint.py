"""Binary checkpoint container with integrity checking.

Layout (all integers little-endian uint32):

    magic  b"S4DG"
    version
    header_length, then header_length bytes of UTF-8 JSON
    raw float32 tensor payloads, C order, in header order
    crc32 over everything after the magic and before the checksum

The JSON header carries the tensor directory ({name: shape}, ordered) plus
arbitrary JSON metadata. Tensors round-trip bit-exactly (float32 in, float32
out). Structural problems raise CheckpointError with a specific message.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"S4DG"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write tensors (converted to float32) and JSON metadata to path."""
    directory = []
    payloads = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        directory.append([name, list(arr.shape)])
        payloads.append(arr.tobytes())
    header = json.dumps({"tensors": directory, "meta": meta}).encode("utf-8")

    body = bytearray()
    body += struct.pack("<I", VERSION)
    body += struct.pack("<I", len(header))
    body += header
    for blob in payloads:
        body += blob
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(bytes(body))
        f.write(struct.pack("<I", crc))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns ({name: float32 array}, metadata dict)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated file")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    body = raw[4:-4]
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    (version,) = struct.unpack("<I", body[:4])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack("<I", body[4:8])
    if 8 + header_len > len(body):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(body[8:8 + header_len].decode("utf-8"))
        directory = header["tensors"]
        meta = header["meta"]
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from None

    tensors = {}
    offset = 8 + header_len
    for name, shape in directory:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated tensor '{name}'")
        flat = np.frombuffer(body[offset:offset + nbytes], dtype="<f4")
        tensors[name] = flat.reshape(shape).astype(np.float32, copy=True)
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor payload")
    return tensors, meta
