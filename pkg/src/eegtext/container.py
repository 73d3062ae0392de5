"""Binary container shared by checkpoints and epoch files.

Layout::

    magic (8 bytes) | manifest length (u64 LE) | manifest (UTF-8 JSON)
    | payload (little-endian arrays, packed) | checksum (8 bytes)

The manifest lists ``{name, shape, dtype, offset, length}`` per array plus a
free-form ``meta`` object. The checksum is an 8-byte BLAKE2b digest over
everything between the magic and the checksum itself.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

CHECKSUM_BYTES = 8
_ALLOWED = {"float32", "float64", "int64", "int32", "uint8", "bool"}


class ContainerError(ValueError):
    pass


class ChecksumError(ContainerError):
    pass


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=CHECKSUM_BYTES).digest()


def pack(magic: bytes, arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.name not in _ALLOWED:
            raise ContainerError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                        "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True).encode("utf-8")
    body = struct.pack("<Q", len(manifest)) + manifest + b"".join(chunks)
    return magic + body + _digest(body)


def unpack(blob: bytes, magic: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 8 + 8 + CHECKSUM_BYTES:
        raise ContainerError("file is truncated")
    if blob[:8] != magic:
        raise ContainerError(f"bad magic {blob[:8]!r}, expected {magic!r}")
    body, stored = blob[8:-CHECKSUM_BYTES], blob[-CHECKSUM_BYTES:]
    (mlen,) = struct.unpack("<Q", body[:8])
    if 8 + mlen > len(body):
        raise ContainerError("file is truncated inside the manifest")
    if _digest(body) != stored:
        raise ChecksumError("checksum mismatch: file is corrupted")
    try:
        manifest = json.loads(body[8:8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable manifest: {exc}") from None
    payload = memoryview(body)[8 + mlen:]
    arrays = {}
    for e in manifest["arrays"]:
        if e["dtype"] not in _ALLOWED:
            raise ContainerError(f"unsupported dtype {e['dtype']!r}")
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * dt.itemsize != e["length"] or e["offset"] + e["length"] > len(payload):
            raise ContainerError(f"manifest disagrees with payload for {e['name']!r}")
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
    return arrays, manifest.get("meta", {})


def write_file(path, magic: bytes, arrays: dict[str, np.ndarray], meta: dict) -> None:
    Path(path).write_bytes(pack(magic, arrays, meta))


def read_file(path, magic: bytes) -> tuple[dict[str, np.ndarray], dict]:
    return unpack(Path(path).read_bytes(), magic)
