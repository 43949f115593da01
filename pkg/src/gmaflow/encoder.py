"""Toy feature and context encoders built from strided 2-D convolutions.

Each encoder is three 3x3 stride-2 ReLU stages (1/8 resolution) followed
by a 1x1 projection head. Weights are fixed: seeded random or loaded from
an ``ENC1`` container.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import container
from .core import FeatureMap, ImageGrid, ShapeError

ENCODER_MAGIC = b"ENC1"
STAGE_CHANNELS = (16, 24, 32)


class Act(enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    NONE = "none"


def apply_act(x: np.ndarray, act: Act) -> np.ndarray:
    if act is Act.RELU:
        return np.maximum(x, 0.0)
    if act is Act.TANH:
        return np.tanh(x)
    return x


@dataclass(frozen=True, eq=False)
class ConvSpec:
    """Convolution weights ``(kH, kW, Cin, Cout)``, bias ``(Cout,)``."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    act: Act = Act.NONE

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64, copy=True)
        b = np.array(self.bias, dtype=np.float64, copy=True).reshape(-1)
        if w.ndim != 4 or w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
            raise ShapeError(f"conv weight must be (kH, kW, Cin, Cout) with odd kernel, got {w.shape}")
        if b.shape != (w.shape[3],):
            raise ShapeError(f"bias {b.shape} does not match {w.shape[3]} output channels")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "act", Act(self.act))

    @property
    def in_channels(self) -> int:
        return self.weight.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[3]

    @property
    def kernel(self):
        return self.weight.shape[:2]


def random_conv(rng, k: int, cin: int, cout: int, stride: int = 1, act: Act = Act.NONE, bias: bool = True) -> ConvSpec:
    bound = 1.0 / math.sqrt(k * k * cin)
    w = rng.uniform(-bound, bound, size=(k, k, cin, cout))
    b = rng.uniform(-bound, bound, size=cout) if bias else np.zeros(cout)
    return ConvSpec(w, b, stride, act)


def conv2d_array(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Cross-correlation on an ``H x W x C`` array; 'same' zero padding, then stride."""
    if x.ndim != 3 or x.shape[2] != spec.in_channels:
        raise ShapeError(f"input {x.shape} does not have {spec.in_channels} channels")
    kh, kw = spec.kernel
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[:: spec.stride, :: spec.stride]
    # win: (Ho, Wo, C, kh, kw)
    out = np.einsum("hwcij,ijco->hwo", win, spec.weight, optimize=True) + spec.bias
    return apply_act(out, spec.act)


def conv2d(fm: FeatureMap, spec: ConvSpec) -> FeatureMap:
    return FeatureMap(conv2d_array(fm.data, spec))


@dataclass(frozen=True, eq=False)
class EncoderWeights:
    feature: tuple
    context: tuple
    d_feat: int
    d_c: int
    d_h: int
    in_channels: int = 3

    def layers(self):
        return list(self.feature) + list(self.context)

    def to_bytes(self) -> bytes:
        header = (self.in_channels, self.d_feat, self.d_c, self.d_h)
        arrays = []
        for spec in self.layers():
            arrays += [spec.weight, spec.bias]
        return container.pack(ENCODER_MAGIC, header, arrays)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EncoderWeights":
        def shapes(h):
            if min(h) < 1:
                raise container.ContainerError(f"invalid encoder header {h}")
            return [s for layer in _encoder_layout(*h) for s in (layer[0], (layer[0][3],))]

        header, arrays = container.unpack(blob, ENCODER_MAGIC, 4, shapes)
        return _encoder_from_arrays(header, arrays)


def _encoder_layout(in_channels, d_feat, d_c, d_h):
    """``(weight shape, stride, act)`` for each layer, feature net first."""
    c1, c2, c3 = STAGE_CHANNELS
    trunk = [((3, 3, in_channels, c1), 2, Act.RELU), ((3, 3, c1, c2), 2, Act.RELU), ((3, 3, c2, c3), 2, Act.RELU)]
    feature = trunk + [((1, 1, c3, d_feat), 1, Act.NONE)]
    context = trunk + [((1, 1, c3, d_c + d_h), 1, Act.NONE)]
    return feature + context


def _encoder_from_arrays(header, arrays):
    in_channels, d_feat, d_c, d_h = header
    specs = []
    for i, (_, stride, act) in enumerate(_encoder_layout(*header)):
        specs.append(ConvSpec(arrays[2 * i], arrays[2 * i + 1], stride, act))
    return EncoderWeights(tuple(specs[:4]), tuple(specs[4:]), d_feat, d_c, d_h, in_channels)


def init_encoder(seed: int = 0, d_feat: int = 32, d_c: int = 32, d_h: int = 32, in_channels: int = 3) -> EncoderWeights:
    rng = np.random.default_rng(seed)
    specs = []
    for shape, stride, act in _encoder_layout(in_channels, d_feat, d_c, d_h):
        k, _, cin, cout = shape
        specs.append(random_conv(rng, k, cin, cout, stride, act))
    return EncoderWeights(tuple(specs[:4]), tuple(specs[4:]), d_feat, d_c, d_h, in_channels)


def save_encoder(weights: EncoderWeights, path) -> None:
    container.write_bytes(path, weights.to_bytes())


def load_encoder(path) -> EncoderWeights:
    return EncoderWeights.from_bytes(container.read_bytes(path))


def _run(img: ImageGrid, layers) -> np.ndarray:
    if img.height % 8 or img.width % 8:
        raise ShapeError(f"image size {img.height}x{img.width} must be divisible by 8")
    x = img.data
    for spec in layers:
        x = conv2d_array(x, spec)
    return x


def feature_encoder(img: ImageGrid, weights: EncoderWeights) -> FeatureMap:
    """Matching features at 1/8 resolution with ``d_feat`` channels."""
    return FeatureMap(_run(img, weights.feature))


def context_encoder(img: ImageGrid, weights: EncoderWeights):
    """``(context, hidden0)``: raw context features and Tanh-squashed initial GRU state."""
    out = _run(img, weights.context)
    ctx, hidden = out[..., : weights.d_c], out[..., weights.d_c:]
    return FeatureMap(ctx), FeatureMap(np.tanh(hidden))
