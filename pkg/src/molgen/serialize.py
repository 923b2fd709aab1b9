"""Checksummed named-array container used by checkpoints and critic files.

Layout: an 8-byte magic, a JSON metadata block, named arrays, then an
8-byte blake2b digest of everything before it. Byte-deterministic for
identical inputs.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np


class BlobError(ValueError):
    pass


def pack_blob(magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise BlobError("magic must be 8 bytes")
    body = bytearray()
    body += magic
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    body += struct.pack(">I", len(meta_bytes)) + meta_bytes
    body += struct.pack(">I", len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        name_b = name.encode()
        dtype_b = str(arr.dtype).encode()
        body += struct.pack(">H", len(name_b)) + name_b
        body += struct.pack(">H", len(dtype_b)) + dtype_b
        body += struct.pack(">B", arr.ndim)
        for dim in arr.shape:
            body += struct.pack(">I", dim)
        raw = arr.tobytes()
        body += struct.pack(">Q", len(raw)) + raw
    body += hashlib.blake2b(bytes(body), digest_size=8).digest()
    return bytes(body)


def unpack_blob(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 20:
        raise BlobError("blob too short")
    if hashlib.blake2b(blob[:-8], digest_size=8).digest() != blob[-8:]:
        raise BlobError("checksum mismatch (truncated or corrupt file)")
    view = memoryview(blob[:-8])
    if bytes(view[:8]) != magic:
        raise BlobError(f"wrong magic: expected {magic!r}")
    offset = 8
    (meta_len,) = struct.unpack(">I", view[offset:offset + 4])
    offset += 4
    meta = json.loads(bytes(view[offset:offset + meta_len]).decode())
    offset += meta_len
    (count,) = struct.unpack(">I", view[offset:offset + 4])
    offset += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack(">H", view[offset:offset + 2])
        offset += 2
        name = bytes(view[offset:offset + name_len]).decode()
        offset += name_len
        (dtype_len,) = struct.unpack(">H", view[offset:offset + 2])
        offset += 2
        dtype = bytes(view[offset:offset + dtype_len]).decode()
        offset += dtype_len
        ndim = view[offset]
        offset += 1
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack(">I", view[offset:offset + 4])
            offset += 4
            shape.append(dim)
        (nbytes,) = struct.unpack(">Q", view[offset:offset + 8])
        offset += 8
        arrays[name] = np.frombuffer(view[offset:offset + nbytes], dtype=dtype
                                     ).reshape(shape).copy()
        offset += nbytes
    if offset != len(view):
        raise BlobError("trailing bytes after the last array")
    return meta, arrays
