"""Dense-grid value types and the numeric primitives shared by every module.

All grids are numpy arrays in row-major ``(row, col, channel)`` order and
are computed in float64. Flattening a ``H x W x D`` map gives an ``N x D``
matrix with ``N = H * W`` and pixel ``(r, c)`` at index ``r * W + c``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes do not satisfy an operation's contract."""


def _frozen(array, dtype=np.float64):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """An ``H x W x D`` grid of finite real features."""

    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"feature map must be H x W x D with all dims >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel displacement ``(u, v)`` in pixels plus a validity mask.

    ``u`` is the horizontal (column) displacement and ``v`` the vertical
    (row) displacement; ``uv`` has shape ``H x W x 2``.
    """

    uv: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        uv = _frozen(self.uv)
        if uv.ndim != 3 or uv.shape[2] != 2 or min(uv.shape[:2]) < 1:
            raise ShapeError(f"flow must be H x W x 2, got {uv.shape}")
        if self.valid is None:
            valid = np.ones(uv.shape[:2], dtype=bool)
        else:
            valid = np.asarray(self.valid, dtype=bool)
        if valid.shape != uv.shape[:2]:
            raise ShapeError(f"valid mask {valid.shape} does not match flow {uv.shape[:2]}")
        if not np.all(np.isfinite(uv[valid])):
            raise ValueError("flow has non-finite displacements at valid pixels")
        valid = valid.copy()
        valid.setflags(write=False)
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2)))

    @property
    def height(self) -> int:
        return self.uv.shape[0]

    @property
    def width(self) -> int:
        return self.uv.shape[1]

    @property
    def u(self) -> np.ndarray:
        return self.uv[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.uv[..., 1]

    def __eq__(self, other):
        if not isinstance(other, FlowField):
            return NotImplemented
        return (
            self.uv.shape == other.uv.shape
            and bool(np.array_equal(self.valid, other.valid))
            and bool(np.array_equal(self.uv[self.valid], other.uv[other.valid]))
        )


@dataclass(frozen=True, eq=False)
class AttentionMatrix:
    """Row-stochastic matrix of attention weights, ``N x N`` for self-attention."""

    weights: np.ndarray

    def __post_init__(self):
        w = _frozen(self.weights)
        if w.ndim != 2:
            raise ShapeError(f"attention must be 2-D, got {w.shape}")
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[1]

    def is_row_stochastic(self, atol: float = 1e-6) -> bool:
        w = self.weights
        return bool(np.all(w >= 0.0) and np.all(np.abs(w.sum(axis=1) - 1.0) <= atol))


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """An ``H x W x C`` image with ``C`` in {1, 3} and values in ``[0, 1]``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3 or data.shape[2] not in (1, 3) or min(data.shape[:2]) < 1:
            raise ShapeError(f"image must be H x W x {{1,3}}, got {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("image values must be finite and within [0, 1]")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        if not isinstance(other, ImageGrid):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))


def softmax_rows(logits) -> AttentionMatrix:
    """Normalized exponential of each row, stabilized by subtracting the row max.

    Raises:
        ValueError: if any logit is NaN or infinite. The message names the
            first offending row.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"logits must be a 2-D grid, got {z.shape}")
    bad = ~np.all(np.isfinite(z), axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ValueError(f"non-finite logit in row {row}")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return AttentionMatrix(e / e.sum(axis=1, keepdims=True))


def flatten_hw(fm: FeatureMap) -> np.ndarray:
    """``H x W x D`` map to ``N x D`` matrix in row-major pixel order."""
    h, w, d = fm.data.shape
    return fm.data.reshape(h * w, d).copy()


def unflatten_hw(flat, height: int, width: int) -> FeatureMap:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.ndim != 2 or flat.shape[0] != height * width:
        raise ShapeError(f"cannot unflatten {flat.shape} into {height} x {width} pixels")
    return FeatureMap(flat.reshape(height, width, flat.shape[1]))


def pixel_index(row: int, col: int, width: int) -> int:
    return row * width + col


def concat_channels(*maps: FeatureMap) -> FeatureMap:
    shapes = {m.data.shape[:2] for m in maps}
    if len(shapes) != 1:
        raise ShapeError(f"cannot concatenate maps with spatial shapes {sorted(shapes)}")
    return FeatureMap(np.concatenate([m.data for m in maps], axis=2))
