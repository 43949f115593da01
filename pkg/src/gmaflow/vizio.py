"""Flow files (.flo), binary PPM/PGM images, flow colorization, attention heatmaps."""

from __future__ import annotations

import io
import re
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .core import AttentionMatrix, FlowField, ImageGrid

FLO_MAGIC = 202021.25
FLO_MAGIC_BYTES = struct.pack("<f", FLO_MAGIC)
# Middlebury convention for unknown flow on read
UNKNOWN_FLOW_THRESHOLD = 1e9
MAX_FLO_PIXELS = 1 << 28


class FormatError(ValueError):
    """Malformed flow or image file."""


@contextmanager
def _open(target, mode):
    if isinstance(target, (str, Path)):
        with open(target, mode) as fh:
            yield fh
    else:
        yield target


def write_flo(flow: FlowField, sink) -> None:
    """Write ``flow`` as a little-endian Middlebury .flo file to a path or binary stream.

    Invalid pixels are stored with the unknown-flow marker 1e10.
    """
    uv = np.array(flow.uv, dtype=np.float64)
    uv[~flow.valid] = 1e10
    if not np.all(np.isfinite(uv)):
        raise ValueError("cannot write non-finite flow")
    h, w = flow.height, flow.width
    payload = FLO_MAGIC_BYTES + struct.pack("<ii", w, h) + uv.astype("<f4").tobytes()
    with _open(sink, "wb") as fh:
        fh.write(payload)


def flo_bytes(flow: FlowField) -> bytes:
    buf = io.BytesIO()
    write_flo(flow, buf)
    return buf.getvalue()


def read_flo(source) -> FlowField:
    with _open(source, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise FormatError("truncated .flo header")
    if blob[:4] != FLO_MAGIC_BYTES:
        raise FormatError(f"bad .flo magic {blob[:4]!r}")
    w, h = struct.unpack("<ii", blob[4:12])
    if w < 1 or h < 1 or w * h > MAX_FLO_PIXELS:
        raise FormatError(f"invalid .flo size {w}x{h}")
    need = 12 + 8 * w * h
    if len(blob) < need:
        raise FormatError(f"truncated .flo payload: {len(blob)} bytes, need {need}")
    if len(blob) > need:
        raise FormatError(f"trailing data after .flo payload: {len(blob) - need} bytes")
    uv = np.frombuffer(blob, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float64)
    valid = np.all(np.isfinite(uv), axis=2) & np.all(np.abs(uv) < UNKNOWN_FLOW_THRESHOLD, axis=2)
    uv = np.where(valid[..., None], uv, 0.0)
    return FlowField(uv, valid)


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def write_image(img: ImageGrid, sink) -> None:
    """Binary PGM (1 channel) or PPM (3 channels), maxval 255."""
    magic = b"P5" if img.channels == 1 else b"P6"
    data = np.rint(img.data * 255.0).astype(np.uint8)
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    with _open(sink, "wb") as fh:
        fh.write(header + data.tobytes())


def read_image(source) -> ImageGrid:
    with _open(source, "rb") as fh:
        blob = fh.read()
    pos, tokens = 0, []
    for _ in range(4):
        m = _TOKEN.match(blob, pos)
        if not m:
            raise FormatError("malformed PNM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM type {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("malformed PNM header") from None
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    if w < 1 or h < 1:
        raise FormatError(f"invalid image size {w}x{h}")
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise FormatError("malformed PNM header")
    pos += 1
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    if len(blob) - pos < need:
        raise FormatError(f"truncated image payload: {len(blob) - pos} bytes, need {need}")
    data = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos).reshape(h, w, c)
    return ImageGrid(data / 255.0)


def write_codes(codes: np.ndarray, sink) -> None:
    """Write an integer label grid (0..255) as PGM with the raw codes as bytes."""
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.min() < 0 or codes.max() > 255:
        raise ValueError("codes must be a 2-D grid of values in 0..255")
    write_image(ImageGrid(codes.astype(np.float64)[..., None] / 255.0), sink)


def read_codes(source) -> np.ndarray:
    img = read_image(source)
    if img.channels != 1:
        raise FormatError("label maps must be single-channel PGM")
    return np.rint(img.data[..., 0] * 255.0).astype(np.uint8)


def make_colorwheel() -> np.ndarray:
    """The 55-entry Middlebury color wheel (RGB, 0..255)."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[col:col + ry, 0] = 255
    wheel[col:col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    return wheel


def flow_to_color(flow: FlowField, max_norm: float | None = None) -> ImageGrid:
    """Middlebury-style RGB rendering; hue from angle, saturation from magnitude.

    Magnitudes are divided by ``max_norm`` (default: the largest valid
    magnitude, floored at 1e-5). Zero flow is white, invalid pixels black,
    and magnitudes beyond ``max_norm`` are darkened by 0.75.
    """
    u = np.where(flow.valid, flow.u, 0.0)
    v = np.where(flow.valid, flow.v, 0.0)
    rad = np.sqrt(u * u + v * v)
    if max_norm is None:
        max_norm = float(rad[flow.valid].max()) if flow.valid.any() else 0.0
    scale = max(float(max_norm), 1e-5)
    u, v, rad = u / scale, v / scale, rad / scale

    wheel = make_colorwheel() / 255.0
    ncols = wheel.shape[0]
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = (1.0 - f) * wheel[k0] + f * wheel[k1]
    inside = (rad <= 1.0)[..., None]
    col = np.where(inside, 1.0 - rad[..., None] * (1.0 - col), col * 0.75)
    col[~flow.valid] = 0.0
    return ImageGrid(np.clip(col, 0.0, 1.0))


def attention_heatmap(attention: AttentionMatrix, query_pixel, height: int, width: int) -> ImageGrid:
    """One query's attention row as an ``H x W`` grayscale image, min-max normalized.

    ``query_pixel`` is a flat index or a ``(row, col)`` pair. A constant row
    maps to all zeros.
    """
    n = height * width
    if attention.size != n:
        raise ValueError(f"attention is {attention.size}x{attention.size}, grid has {n} pixels")
    if isinstance(query_pixel, (tuple, list)):
        r, c = query_pixel
        if not (0 <= r < height and 0 <= c < width):
            raise IndexError(f"query pixel {query_pixel} outside {height}x{width}")
        idx = r * width + c
    else:
        idx = int(query_pixel)
        if not 0 <= idx < n:
            raise IndexError(f"query index {idx} outside 0..{n - 1}")
    row = attention.weights[idx].reshape(height, width)
    lo, hi = row.min(), row.max()
    norm = np.zeros_like(row) if hi <= lo else (row - lo) / (hi - lo)
    return ImageGrid(norm[..., None])
