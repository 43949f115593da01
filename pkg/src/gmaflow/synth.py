"""Seeded synthetic frame pairs with exact ground-truth flow and occlusion.

A scene is a textured background plus rectangular layers, each moving by an
integer translation. Scenes are read from JSON::

    {
      "height": 32, "width": 32, "seed": 0,
      "background": {"translation": [u, v]},
      "layers": [
        {"rect": [row, col, height, width], "translation": [u, v],
         "depth": 1, "texture_seed": 7}
      ]
    }

``u`` is horizontal and ``v`` vertical, in pixels. Smaller ``depth`` is
nearer the camera; depths must be distinct and the background is always
farthest. ``texture_seed`` is optional and defaults to a value derived from
the scene seed and the layer's position in the list.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import FlowField, ImageGrid
from .metrics import partition_occlusion


class SceneSpecError(ValueError):
    """Invalid scene description; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class Layer:
    rect: tuple
    translation: tuple
    depth: int
    texture_seed: int

    def __post_init__(self):
        if len(self.rect) != 4 or len(self.translation) != 2:
            raise SceneSpecError("rect needs 4 entries and translation 2")
        if self.rect[2] < 1 or self.rect[3] < 1:
            raise SceneSpecError(f"layer has zero area: rect {self.rect}")
        if self.texture_seed < 0:
            raise SceneSpecError(f"texture_seed must be non-negative, got {self.texture_seed}")


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    background: tuple = (0, 0)
    layers: tuple = field(default_factory=tuple)
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise SceneSpecError(f"canvas must be at least 1x1, got {self.height}x{self.width}")
        if self.seed < 0:
            raise SceneSpecError(f"seed must be non-negative, got {self.seed}")
        depths = [layer.depth for layer in self.layers]
        if len(set(depths)) != len(depths):
            raise SceneSpecError(f"layer depths must be distinct, got {depths}")
        # paint order: farthest first
        object.__setattr__(self, "layers", tuple(sorted(self.layers, key=lambda l: -l.depth)))


def _int_pair(value, what, line):
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise SceneSpecError(f"{what} must be a pair [u, v]", line)
    out = []
    for x in value:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or x != int(x):
            raise SceneSpecError(f"{what} must hold integers, got {value}", line)
        out.append(int(x))
    return tuple(out)


def _line_of(text: str, key: str, start: int = 0) -> int | None:
    pos = text.find(f'"{key}"', start)
    return text.count("\n", 0, pos) + 1 if pos >= 0 else None


def parse_scene(text: str) -> SceneSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneSpecError(exc.msg, exc.lineno) from None
    if not isinstance(doc, dict):
        raise SceneSpecError("top level must be an object", 1)
    for key in ("height", "width"):
        if not isinstance(doc.get(key), int) or isinstance(doc.get(key), bool):
            raise SceneSpecError(f"'{key}' must be an integer", _line_of(text, key) or 1)
    bg = doc.get("background", {}).get("translation", [0, 0])
    background = _int_pair(bg, "background translation", _line_of(text, "background"))
    layers = []
    cursor = 0
    for i, raw in enumerate(doc.get("layers", [])):
        line = _line_of(text, "rect", cursor)
        if line is not None:
            cursor = text.find('"rect"', cursor) + 1
        if not isinstance(raw, dict):
            raise SceneSpecError(f"layer {i} must be an object", line)
        rect = raw.get("rect")
        if not isinstance(rect, list) or len(rect) != 4 or not all(isinstance(v, int) for v in rect):
            raise SceneSpecError(f"layer {i}: 'rect' must be [row, col, height, width] integers", line)
        if "depth" not in raw or not isinstance(raw["depth"], int):
            raise SceneSpecError(f"layer {i}: 'depth' must be an integer", line)
        tex = raw.get("texture_seed", int(doc.get("seed", 0)) * 1000 + i + 1)
        try:
            layers.append(Layer(tuple(rect), _int_pair(raw.get("translation", [0, 0]), f"layer {i} translation", line),
                                raw["depth"], int(tex)))
        except SceneSpecError as exc:
            raise SceneSpecError(f"layer {i}: {exc}", line) from None
    return SceneSpec(doc["height"], doc["width"], background, tuple(layers), int(doc.get("seed", 0)))


def load_scene(path) -> SceneSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_scene(fh.read())


@dataclass(frozen=True, eq=False)
class RenderedPair:
    img1: ImageGrid
    img2: ImageGrid
    gt: FlowField
    occ: np.ndarray
    partition: np.ndarray


def _texture(seed: int, shape) -> np.ndarray:
    # multiples of 1/255 so 8-bit image files hold them exactly
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(*shape, 3)) / 255.0


def _paint(spec: SceneSpec, frame: int, bg_tex: np.ndarray, margin) -> tuple:
    """Image and per-pixel layer label (-1 for background) for one frame."""
    h, w = spec.height, spec.width
    rows, cols = np.mgrid[0:h, 0:w]
    bu, bv = spec.background
    shift_u, shift_v = (bu, bv) if frame == 2 else (0, 0)
    img = bg_tex[rows - shift_v + margin[1], cols - shift_u + margin[0]].copy()
    label = np.full((h, w), -1, dtype=np.int64)
    for idx, layer in enumerate(spec.layers):
        r0, c0, lh, lw = layer.rect
        if frame == 2:
            r0, c0 = r0 + layer.translation[1], c0 + layer.translation[0]
        lr, lc = rows - r0, cols - c0
        cover = (lr >= 0) & (lr < lh) & (lc >= 0) & (lc < lw)
        tex = _texture(layer.texture_seed, (lh, lw))
        img[cover] = tex[lr[cover], lc[cover]]
        label[cover] = idx
    return img, label


def render_pair(spec: SceneSpec) -> RenderedPair:
    """Render both frames with ground-truth flow, occlusion mask, and partition codes."""
    h, w = spec.height, spec.width
    bu, bv = spec.background
    margin = (abs(bu), abs(bv))
    bg_tex = _texture(spec.seed, (h + 2 * margin[1], w + 2 * margin[0]))
    img1, label1 = _paint(spec, 1, bg_tex, margin)
    img2, label2 = _paint(spec, 2, bg_tex, margin)

    motions = np.array([spec.background] + [l.translation for l in spec.layers], dtype=np.int64)
    # nearness rank: background 0, later-painted layers nearer
    rank = np.arange(len(spec.layers) + 1)
    gt = motions[label1 + 1].astype(np.float64)

    rows, cols = np.mgrid[0:h, 0:w]
    tr = rows + gt[..., 1].astype(np.int64)
    tc = cols + gt[..., 0].astype(np.int64)
    out = (tr < 0) | (tr >= h) | (tc < 0) | (tc >= w)
    occluder = np.full((h, w), -1, dtype=np.int64)
    occluder[~out] = label2[tr[~out], tc[~out]]
    covered = np.zeros((h, w), dtype=bool)
    covered[~out] = rank[occluder[~out] + 1] > rank[label1[~out] + 1]
    occ = out | covered

    flow = FlowField(gt)
    return RenderedPair(ImageGrid(img1), ImageGrid(img2), flow, occ, partition_occlusion(occ, flow))


def out_of_frame_count(height: int, width: int, u: int, v: int) -> int:
    """Pixels that leave an ``height x width`` frame under a pure translation."""
    return height * abs(u) + width * abs(v) - abs(u) * abs(v)
