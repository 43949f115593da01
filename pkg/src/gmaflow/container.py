"""Flat little-endian binary container for weight sets.

Layout: a 4-byte ASCII magic, a fixed number of unsigned 32-bit header
fields, then every array as little-endian float64 in row-major order.
The caller owns the meaning of the header and the order of the arrays.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


class ContainerError(ValueError):
    """Malformed or mismatched weight container."""


def pack(magic: bytes, header, arrays) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    parts = [magic, struct.pack(f"<{len(header)}I", *header)]
    for a in arrays:
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def unpack(blob: bytes, magic: bytes, n_header: int, shapes_from_header):
    """Split ``blob`` into header ints and arrays.

    ``shapes_from_header`` maps the decoded header tuple to the list of
    array shapes stored after it.
    """
    head = 4 + 4 * n_header
    if len(blob) < head:
        raise ContainerError("container truncated in header")
    if blob[:4] != magic:
        raise ContainerError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    header = struct.unpack(f"<{n_header}I", blob[4:head])
    shapes = shapes_from_header(header)
    sizes = [int(np.prod(s)) for s in shapes]
    expected = head + 8 * sum(sizes)
    if len(blob) != expected:
        raise ContainerError(f"container payload is {len(blob)} bytes, expected {expected}")
    payload = np.frombuffer(blob, dtype="<f8", offset=head).astype(np.float64)
    arrays, pos = [], 0
    for shape, size in zip(shapes, sizes):
        arrays.append(payload[pos:pos + size].reshape(shape))
        pos += size
    return header, arrays


def write_bytes(path, blob: bytes) -> None:
    Path(path).write_bytes(blob)


def read_bytes(path) -> bytes:
    return Path(path).read_bytes()
