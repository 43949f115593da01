"""All-pairs correlation volume, its pooled pyramid, and windowed lookup."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import FeatureMap, FlowField, ShapeError

DEFAULT_LEVELS = 4
DEFAULT_RADIUS = 4


def all_pairs_correlation(f1: FeatureMap, f2: FeatureMap) -> np.ndarray:
    """Volume of shape ``(H, W, H, W)`` with ``vol[r1, c1, r2, c2] = <f1, f2> / sqrt(D)``."""
    if f1.data.shape != f2.data.shape:
        raise ShapeError(f"feature maps differ: {f1.data.shape} vs {f2.data.shape}")
    h, w, d = f1.data.shape
    a = f1.data.reshape(h * w, d)
    b = f2.data.reshape(h * w, d)
    return ((a @ b.T) / math.sqrt(d)).reshape(h, w, h, w)


def _pool2(vol: np.ndarray) -> np.ndarray:
    h, w, h2, w2 = vol.shape
    return vol.reshape(h, w, h2 // 2, 2, w2 // 2, 2).mean(axis=(3, 5))


@dataclass(frozen=True, eq=False)
class CorrPyramid:
    levels: tuple

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def shape(self):
        return self.levels[0].shape[:2]


def build_pyramid(vol, num_levels: int = DEFAULT_LEVELS) -> CorrPyramid:
    """Average-pool the target (last two) dims by 2 per level."""
    vol = np.asarray(vol, dtype=np.float64)
    if vol.ndim != 4:
        raise ShapeError(f"correlation volume must be 4-D, got {vol.shape}")
    if num_levels < 1:
        raise ValueError("num_levels must be >= 1")
    factor = 2 ** (num_levels - 1)
    if vol.shape[2] % factor or vol.shape[3] % factor:
        raise ShapeError(f"target dims {vol.shape[2:]} not divisible by {factor} for {num_levels} levels")
    levels = [vol]
    for _ in range(num_levels - 1):
        levels.append(_pool2(levels[-1]))
    for lv in levels:
        lv.setflags(write=False)
    return CorrPyramid(tuple(levels))


def bilinear_sample(grid: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample per-source-pixel 2-D maps with zero padding.

    ``grid`` is ``(N, h, w)``; ``ys``/``xs`` are ``(N, S)`` coordinates in
    that map's pixel units. Returns ``(N, S)``.
    """
    n, h, w = grid.shape
    flat = grid.reshape(n, h * w)
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = ys - y0
    fx = xs - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    out = np.zeros(ys.shape)
    rows = np.arange(n)[:, None]
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            idx = np.where(inside, yy * w + xx, 0)
            vals = np.where(inside, flat[rows, idx], 0.0)
            out += wy * wx * vals
    return out


def lookup(pyr: CorrPyramid, flow: FlowField, radius: int = DEFAULT_RADIUS) -> FeatureMap:
    """Windowed correlation features around each pixel's current target.

    Channels are level-major; within a level the ``(2r+1)^2`` window is
    row-major (vertical offset outer, horizontal offset inner).
    """
    h, w = pyr.shape
    if (flow.height, flow.width) != (h, w):
        raise ShapeError(f"flow {flow.height}x{flow.width} does not match pyramid {h}x{w}")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    tx = (cols + flow.u).reshape(-1, 1)
    ty = (rows + flow.v).reshape(-1, 1)
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    oy, ox = np.meshgrid(d, d, indexing="ij")
    oy, ox = oy.reshape(1, -1), ox.reshape(1, -1)
    feats = []
    for level, vol in enumerate(pyr.levels):
        s = 2.0 ** level
        grid = vol.reshape(h * w, vol.shape[2], vol.shape[3])
        feats.append(bilinear_sample(grid, ty / s + oy, tx / s + ox))
    return FeatureMap(np.concatenate(feats, axis=1).reshape(h, w, -1))
