"""Iterative residual refinement.

Each iteration looks up the correlation pyramid around the current flow,
encodes the result into motion features ``y``, optionally aggregates them
with GMA, and lets a convolutional GRU decode a residual flow that is added
to the running estimate. The 1/8-resolution result is bilinearly upsampled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container, gma
from .core import FeatureMap, FlowField, ImageGrid, ShapeError, concat_channels, flatten_hw
from .correlation import all_pairs_correlation, build_pyramid, lookup
from .encoder import (
    Act,
    ConvSpec,
    EncoderWeights,
    _encoder_from_arrays,
    _encoder_layout,
    context_encoder,
    conv2d_array,
    feature_encoder,
    init_encoder,
    random_conv,
)

PIPELINE_MAGIC = b"RFN1"
MOTION_HIDDEN = (64, 48, 16)
HEAD_HIDDEN = 64


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True, eq=False)
class MotionEncoderWeights:
    corr1: ConvSpec
    corr2: ConvSpec
    flow: ConvSpec
    fuse: ConvSpec

    @property
    def d_m(self) -> int:
        return self.fuse.out_channels


@dataclass(frozen=True, eq=False)
class GruWeights:
    """Gates act on ``[hidden | inputs]``; the flow head reads the new hidden state.

    Input channels follow the full ``[y | y_hat | x]`` layout. Narrower
    layouts are served by :meth:`folded`.
    """

    conv_z: ConvSpec
    conv_r: ConvSpec
    conv_q: ConvSpec
    head1: ConvSpec
    head2: ConvSpec

    @property
    def d_h(self) -> int:
        return self.conv_z.out_channels

    @property
    def input_channels(self) -> int:
        return self.conv_z.in_channels - self.d_h

    def folded(self, d_m: int) -> "GruWeights":
        """Weights for a ``[m | x]`` input where ``m`` replaces both ``y`` and ``y_hat``.

        The two motion blocks are summed, so when ``y_hat == y`` the folded
        GRU on ``[y | x]`` computes what the full GRU computes on ``[y | y | x]``.
        """
        d_h = self.d_h

        def fold(spec):
            w = spec.weight
            a, b = d_h, d_h + d_m
            merged = w[:, :, a:b] + w[:, :, b:b + d_m]
            nw = np.concatenate([w[:, :, :a], merged, w[:, :, b + d_m:]], axis=2)
            return ConvSpec(nw, spec.bias, spec.stride, spec.act)

        return GruWeights(fold(self.conv_z), fold(self.conv_r), fold(self.conv_q), self.head1, self.head2)


@dataclass(frozen=True, eq=False)
class GruState:
    hidden: FeatureMap


@dataclass(frozen=True, eq=False)
class PipelineWeights:
    encoder: EncoderWeights
    motion: MotionEncoderWeights
    gru: GruWeights
    gma: gma.GmaParams
    num_levels: int
    radius: int

    def header(self):
        e = self.encoder
        return (e.in_channels, e.d_feat, e.d_c, e.d_h, self.motion.d_m, self.gma.d_in,
                self.num_levels, self.radius, self.gma.h_max, self.gma.w_max)

    def to_bytes(self) -> bytes:
        convs = self.encoder.layers() + _motion_list(self.motion) + _gru_list(self.gru)
        arrays = [a for spec in convs for a in (spec.weight, spec.bias)]
        p = self.gma
        arrays += [p.w_qry, p.w_key, p.w_val, np.array([p.alpha]), p.pos_v, p.pos_h]
        return container.pack(PIPELINE_MAGIC, self.header(), arrays)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PipelineWeights":
        header, arrays = container.unpack(blob, PIPELINE_MAGIC, 10, _pipeline_shapes)
        in_ch, d_feat, d_c, d_h, d_m, d_in, levels, radius, h_max, w_max = header
        enc_n = 2 * len(_encoder_layout(in_ch, d_feat, d_c, d_h))
        encoder = _encoder_from_arrays((in_ch, d_feat, d_c, d_h), arrays[:enc_n])
        rest = arrays[enc_n:]
        specs = []
        for i, (_, stride, act) in enumerate(_refine_layout(levels, radius, d_c, d_h, d_m)):
            specs.append(ConvSpec(rest[2 * i], rest[2 * i + 1], stride, act))
        wq, wk, wv, alpha, pv, ph = rest[2 * len(specs):]
        return cls(
            encoder=encoder,
            motion=MotionEncoderWeights(*specs[:4]),
            gru=GruWeights(*specs[4:]),
            gma=gma.GmaParams(wq, wk, wv, float(alpha[0]), pv, ph),
            num_levels=levels,
            radius=radius,
        )


def _motion_list(m):
    return [m.corr1, m.corr2, m.flow, m.fuse]


def _gru_list(g):
    return [g.conv_z, g.conv_r, g.conv_q, g.head1, g.head2]


def _refine_layout(levels, radius, d_c, d_h, d_m):
    corr_ch = levels * (2 * radius + 1) ** 2
    c1, c2, cf = MOTION_HIDDEN
    gru_in = d_h + 2 * d_m + d_c
    return [
        ((1, 1, corr_ch, c1), 1, Act.RELU),
        ((3, 3, c1, c2), 1, Act.RELU),
        ((3, 3, 2, cf), 1, Act.RELU),
        ((3, 3, c2 + cf, d_m), 1, Act.RELU),
        ((3, 3, gru_in, d_h), 1, Act.NONE),
        ((3, 3, gru_in, d_h), 1, Act.NONE),
        ((3, 3, gru_in, d_h), 1, Act.NONE),
        ((3, 3, d_h, HEAD_HIDDEN), 1, Act.RELU),
        ((3, 3, HEAD_HIDDEN, 2), 1, Act.NONE),
    ]


def _pipeline_shapes(header):
    in_ch, d_feat, d_c, d_h, d_m, d_in, levels, radius, h_max, w_max = header
    if min(in_ch, d_feat, d_c, d_h, d_m, d_in, levels, h_max, w_max) < 1:
        raise container.ContainerError(f"invalid pipeline header {header}")
    layers = _encoder_layout(in_ch, d_feat, d_c, d_h) + _refine_layout(levels, radius, d_c, d_h, d_m)
    shapes = [s for shape, _, _ in layers for s in (shape, (shape[3],))]
    return shapes + [(d_in, d_c), (d_in, d_c), (d_m, d_m), (1,), (2 * h_max - 1, d_in), (2 * w_max - 1, d_in)]


def init_pipeline(
    seed: int = 0,
    d_feat: int = 32,
    d_c: int = 32,
    d_h: int = 32,
    d_m: int = 32,
    d_in: int = 32,
    num_levels: int = 4,
    radius: int = 4,
    h_max: int = 8,
    w_max: int = 8,
) -> PipelineWeights:
    """Seeded random weights; GMA starts at its identity (alpha = 0)."""
    enc_seed, ref_seed, gma_seed = np.random.SeedSequence(seed).generate_state(3)
    encoder = init_encoder(int(enc_seed), d_feat, d_c, d_h)
    rng = np.random.default_rng(int(ref_seed))
    specs = [random_conv(rng, shape[0], shape[2], shape[3], stride, act)
             for shape, stride, act in _refine_layout(num_levels, radius, d_c, d_h, d_m)]
    return PipelineWeights(
        encoder=encoder,
        motion=MotionEncoderWeights(*specs[:4]),
        gru=GruWeights(*specs[4:]),
        gma=gma.init_params(d_in, d_c, d_m, h_max, w_max, seed=int(gma_seed)),
        num_levels=num_levels,
        radius=radius,
    )


def save_pipeline(weights: PipelineWeights, path) -> None:
    container.write_bytes(path, weights.to_bytes())


def load_pipeline(path) -> PipelineWeights:
    return PipelineWeights.from_bytes(container.read_bytes(path))


def motion_encoder(corr_features: FeatureMap, flow: FlowField, weights: MotionEncoderWeights) -> FeatureMap:
    if corr_features.data.shape[:2] != flow.uv.shape[:2]:
        raise ShapeError("correlation features and flow differ in spatial size")
    c = conv2d_array(corr_features.data, weights.corr1)
    c = conv2d_array(c, weights.corr2)
    f = conv2d_array(flow.uv, weights.flow)
    return FeatureMap(conv2d_array(np.concatenate([c, f], axis=2), weights.fuse))


def gru_update(state: GruState, inputs: FeatureMap, weights: GruWeights):
    """One convolutional GRU step followed by the flow head.

    ``z`` and ``r`` are logistic gates, the candidate is Tanh, and the new
    hidden state is ``(1 - z) * h + z * candidate``.
    """
    h = state.hidden.data
    if inputs.data.shape[:2] != h.shape[:2]:
        raise ShapeError("GRU inputs and hidden state differ in spatial size")
    if inputs.channels != weights.input_channels:
        raise ShapeError(f"GRU expects {weights.input_channels} input channels, got {inputs.channels}")
    hx = np.concatenate([h, inputs.data], axis=2)
    z = _sigmoid(conv2d_array(hx, weights.conv_z))
    r = _sigmoid(conv2d_array(hx, weights.conv_r))
    q = np.tanh(conv2d_array(np.concatenate([r * h, inputs.data], axis=2), weights.conv_q))
    h_new = (1.0 - z) * h + z * q
    delta = conv2d_array(conv2d_array(h_new, weights.head1), weights.head2)
    return GruState(FeatureMap(h_new)), FlowField(delta)


@dataclass
class PipelineConfig:
    iterations: int = 12
    gma: gma.GmaConfig | None = field(default_factory=gma.GmaConfig)


@dataclass
class IterationTrace:
    residuals: list = field(default_factory=list)
    flows: list = field(default_factory=list)
    hidden: list = field(default_factory=list)
    attention: object = None
    initial_flow: FlowField | None = None


def _interp_matrix(n_out: int, n_in: int, factor: int) -> np.ndarray:
    src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample_flow(flow: FlowField, factor: int = 8) -> FlowField:
    """Bilinear (half-pixel aligned, edge clamped) upsampling with values scaled by ``factor``."""
    h, w = flow.height, flow.width
    mr = _interp_matrix(h * factor, h, factor)
    mc = _interp_matrix(w * factor, w, factor)
    up = np.einsum("Hh,hwc,Ww->HWc", mr, flow.uv, mc)
    return FlowField(up * factor)


def run_pipeline(img1: ImageGrid, img2: ImageGrid, weights: PipelineWeights, config: PipelineConfig | None = None):
    """Estimate full-resolution flow from ``img1`` to ``img2``.

    Returns ``(flow, trace)``. The trace keeps 1/8-resolution residuals,
    accumulated flows, GRU hidden states, and the GMA attention (which
    depends on the reference frame only and is therefore computed once).
    """
    config = config or PipelineConfig()
    if config.iterations < 1:
        raise ValueError("iterations must be >= 1")
    if img1.data.shape != img2.data.shape:
        raise ShapeError(f"images differ in shape: {img1.data.shape} vs {img2.data.shape}")
    enc = weights.encoder
    f1 = feature_encoder(img1, enc)
    f2 = feature_encoder(img2, enc)
    ctx, hidden = context_encoder(img1, enc)
    pyr = build_pyramid(all_pairs_correlation(f1, f2), weights.num_levels)

    gcfg = config.gma
    full_layout = gcfg is not None and gcfg.combine_mode is gma.CombineMode.CONCATENATE
    gru = weights.gru if full_layout else weights.gru.folded(weights.motion.d_m)
    attn = None
    if gcfg is not None:
        attn = gma.gma_attention(ctx, weights.gma, gcfg)
        alpha = gma.effective_alpha(weights.gma, gcfg)

    h8, w8 = ctx.height, ctx.width
    flow = FlowField.zeros(h8, w8)
    trace = IterationTrace(attention=attn, initial_flow=flow)
    state = GruState(hidden)
    for _ in range(config.iterations):
        corr = lookup(pyr, flow, weights.radius)
        y = motion_encoder(corr, flow, weights.motion)
        if gcfg is None:
            inputs = concat_channels(y, ctx)
        else:
            v = flatten_hw(y) @ weights.gma.w_val.T
            y_hat = gma.aggregate(flatten_hw(y), attn, v, alpha, gcfg.residual)
            inputs = gma.combine(y, y_hat, ctx, gcfg)
        state, delta = gru_update(state, inputs, gru)
        flow = FlowField(flow.uv + delta.uv)
        trace.residuals.append(delta)
        trace.flows.append(flow)
        trace.hidden.append(state.hidden)
    return upsample_flow(flow, 8), trace


def max_abs_hidden(trace: IterationTrace) -> float:
    return max(float(np.max(np.abs(h.data))) for h in trace.hidden)


def feature_grid_size(height: int, width: int):
    if height % 8 or width % 8:
        raise ShapeError(f"image size {height}x{width} must be divisible by 8")
    return height // 8, width // 8

