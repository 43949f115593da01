"""Global motion aggregation.

Motion features ``y`` are re-weighted by an attention matrix built from the
self-similarity of the reference frame's context features ``x``::

    y_hat_i = y_i + alpha * sum_j softmax_j(<q_i, k_j> / sqrt(D_in)) * (W_val y_j)

with ``q_i = W_qry x_i`` and ``k_j = W_key x_j``. Two positional variants
add a relative embedding ``p_{j-i}`` to the key, or use it in place of the
key. The embedding is the sum of a vertical-offset and a horizontal-offset
table entry.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from . import container
from .core import AttentionMatrix, FeatureMap, ShapeError, flatten_hw, softmax_rows, unflatten_hw

PARAMS_MAGIC = b"GMA1"


class Variant(enum.Enum):
    CONTENT = "content"
    CONTENT_POS = "content+pos"
    POSITION = "pos"

    @property
    def uses_content(self) -> bool:
        return self is not Variant.POSITION

    @property
    def uses_position(self) -> bool:
        return self is not Variant.CONTENT


class AlphaMode(enum.Enum):
    LEARNED = "learned"
    FIXED_ONE = "fixed-one"


class CombineMode(enum.Enum):
    CONCATENATE = "concatenate"
    REPLACE = "replace"


@dataclass(frozen=True)
class GmaConfig:
    variant: Variant = Variant.CONTENT
    alpha_mode: AlphaMode = AlphaMode.LEARNED
    combine_mode: CombineMode = CombineMode.CONCATENATE
    residual: bool = True
    d_in: int = 128
    d_c: int = 128
    d_m: int = 128

    def __post_init__(self):
        if min(self.d_in, self.d_c, self.d_m) < 1:
            raise ValueError("channel counts must be >= 1")


@dataclass(frozen=True, eq=False)
class GmaParams:
    """Learnable GMA parameters.

    ``pos_v[k]`` embeds vertical offset ``k - (h_max - 1)`` and ``pos_h[k]``
    horizontal offset ``k - (w_max - 1)``, so offset 0 sits at the middle row.
    """

    w_qry: np.ndarray
    w_key: np.ndarray
    w_val: np.ndarray
    alpha: float
    pos_v: np.ndarray
    pos_h: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("w_qry", "w_key", "w_val", "pos_v", "pos_h"):
            a = np.array(getattr(self, name), dtype=np.float64, copy=True)
            if a.ndim != 2:
                raise ShapeError(f"{name} must be 2-D, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite values")
            a.setflags(write=False)
            arrays[name] = a
        d_in, d_c = arrays["w_qry"].shape
        if arrays["w_key"].shape != (d_in, d_c):
            raise ShapeError(f"w_key {arrays['w_key'].shape} must match w_qry {(d_in, d_c)}")
        d_m = arrays["w_val"].shape[0]
        if arrays["w_val"].shape != (d_m, d_m):
            raise ShapeError(f"w_val must be square, got {arrays['w_val'].shape}")
        for name in ("pos_v", "pos_h"):
            rows, dim = arrays[name].shape
            if dim != d_in or rows < 1 or rows % 2 == 0:
                raise ShapeError(f"{name} must be (2*max-1) x {d_in}, got {arrays[name].shape}")
        alpha = float(self.alpha)
        if not math.isfinite(alpha):
            raise ValueError("alpha must be finite")
        for name, a in arrays.items():
            object.__setattr__(self, name, a)
        object.__setattr__(self, "alpha", alpha)

    @property
    def d_in(self) -> int:
        return self.w_qry.shape[0]

    @property
    def d_c(self) -> int:
        return self.w_qry.shape[1]

    @property
    def d_m(self) -> int:
        return self.w_val.shape[0]

    @property
    def h_max(self) -> int:
        return (self.pos_v.shape[0] + 1) // 2

    @property
    def w_max(self) -> int:
        return (self.pos_h.shape[0] + 1) // 2

    def replace(self, **changes) -> "GmaParams":
        return replace(self, **changes)

    def to_bytes(self) -> bytes:
        header = (self.d_in, self.d_c, self.d_m, self.h_max, self.w_max)
        arrays = (self.w_qry, self.w_key, self.w_val, np.array([self.alpha]), self.pos_v, self.pos_h)
        return container.pack(PARAMS_MAGIC, header, arrays)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GmaParams":
        def shapes(h):
            d_in, d_c, d_m, h_max, w_max = h
            if min(h) < 1:
                raise container.ContainerError(f"invalid GMA header {h}")
            return [(d_in, d_c), (d_in, d_c), (d_m, d_m), (1,), (2 * h_max - 1, d_in), (2 * w_max - 1, d_in)]

        _, (wq, wk, wv, alpha, pv, ph) = container.unpack(blob, PARAMS_MAGIC, 5, shapes)
        return cls(wq, wk, wv, float(alpha[0]), pv, ph)


def init_params(d_in: int, d_c: int, d_m: int, h_max: int, w_max: int, seed: int = 0) -> GmaParams:
    """Seeded initialization.

    Projections are drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``;
    alpha starts at zero so the module is an identity on ``y``; positional
    tables start at zero.
    """
    if min(d_in, d_c, d_m, h_max, w_max) < 1:
        raise ValueError("all sizes must be >= 1")
    rng = np.random.default_rng(seed)
    bc, bm = 1.0 / math.sqrt(d_c), 1.0 / math.sqrt(d_m)
    return GmaParams(
        w_qry=rng.uniform(-bc, bc, size=(d_in, d_c)),
        w_key=rng.uniform(-bc, bc, size=(d_in, d_c)),
        w_val=rng.uniform(-bm, bm, size=(d_m, d_m)),
        alpha=0.0,
        pos_v=np.zeros((2 * h_max - 1, d_in)),
        pos_h=np.zeros((2 * w_max - 1, d_in)),
    )


def save_params(params: GmaParams, path) -> None:
    container.write_bytes(path, params.to_bytes())


def load_params(path) -> GmaParams:
    return GmaParams.from_bytes(container.read_bytes(path))


def _as_flat(m) -> np.ndarray:
    if isinstance(m, FeatureMap):
        return flatten_hw(m)
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected an N x D matrix, got {a.shape}")
    return a


def project_qkv(x: FeatureMap, y: FeatureMap, params: GmaParams):
    """Per-pixel projections ``(Q, K, V)`` as ``N x D_in``, ``N x D_in``, ``N x D_m``."""
    if x.data.shape[:2] != y.data.shape[:2]:
        raise ShapeError(f"x {x.data.shape[:2]} and y {y.data.shape[:2]} differ in spatial size")
    if x.channels != params.d_c or y.channels != params.d_m:
        raise ShapeError(
            f"channels (x={x.channels}, y={y.channels}) do not match params (D_c={params.d_c}, D_m={params.d_m})"
        )
    xf, yf = flatten_hw(x), flatten_hw(y)
    return xf @ params.w_qry.T, xf @ params.w_key.T, yf @ params.w_val.T


def _offset_table_index(idx_rows, idx_cols, width, h_max, w_max):
    """Table positions of the vertical and horizontal offset ``j - i``."""
    ri, ci = np.divmod(np.asarray(idx_rows), width)
    rj, cj = np.divmod(np.asarray(idx_cols), width)
    dv = rj[None, :] - ri[:, None] + (h_max - 1)
    dh = cj[None, :] - ci[:, None] + (w_max - 1)
    return dv, dh


def _check_table_range(height, width, pos_v, pos_h):
    h_max, w_max = (pos_v.shape[0] + 1) // 2, (pos_h.shape[0] + 1) // 2
    if height > h_max or width > w_max:
        raise ValueError(
            f"grid {height} x {width} has offsets outside the positional tables "
            f"(configured for at most {h_max} x {w_max})"
        )
    return h_max, w_max


def _logits_block(q_rows, k_cols, pos_v, pos_h, variant, width, rows, cols, scale):
    if variant.uses_content:
        out = q_rows @ k_cols.T
    else:
        out = np.zeros((len(rows), len(cols)))
    if variant.uses_position:
        h_max, w_max = (pos_v.shape[0] + 1) // 2, (pos_h.shape[0] + 1) // 2
        dv, dh = _offset_table_index(rows, cols, width, h_max, w_max)
        out = out + np.take_along_axis(q_rows @ pos_v.T, dv, axis=1)
        out = out + np.take_along_axis(q_rows @ pos_h.T, dh, axis=1)
    return out * scale


def attention_logits(q, k, pos_tables, variant: Variant, height: int, width: int) -> np.ndarray:
    """Scaled similarity logits for every (query, key) pixel pair.

    ``pos_tables`` is ``(pos_v, pos_h)``; it may be ``None`` for the
    content-only variant.
    """
    variant = Variant(variant)
    q = np.asarray(q, dtype=np.float64)
    k = None if k is None else np.asarray(k, dtype=np.float64)
    n = height * width
    if q.ndim != 2 or q.shape[0] != n or (variant.uses_content and (k is None or k.shape != q.shape)):
        raise ShapeError(f"Q {q.shape} / K {None if k is None else k.shape} inconsistent with a {height} x {width} grid")
    pos_v = pos_h = None
    if variant.uses_position:
        if pos_tables is None:
            raise ValueError(f"variant {variant.value} needs positional tables")
        pos_v, pos_h = (np.asarray(t, dtype=np.float64) for t in pos_tables)
        if pos_v.shape[1] != q.shape[1] or pos_h.shape[1] != q.shape[1]:
            raise ShapeError("positional tables must have D_in columns")
        _check_table_range(height, width, pos_v, pos_h)
    idx = np.arange(n)
    return _logits_block(q, k, pos_v, pos_h, variant, width, idx, idx, 1.0 / math.sqrt(q.shape[1]))


def aggregate(y, attention: AttentionMatrix, v, alpha: float, residual: bool = True) -> np.ndarray:
    """``y + alpha * A V`` (or ``alpha * A V`` without the residual)."""
    y, v = _as_flat(y), _as_flat(v)
    a = attention.weights if isinstance(attention, AttentionMatrix) else np.asarray(attention)
    n = a.shape[0]
    if y.shape[0] != n or v.shape != y.shape or a.shape != (n, n):
        raise ShapeError(f"inconsistent shapes y={y.shape}, A={a.shape}, V={v.shape}")
    if residual and alpha == 0.0:
        # exact identity at initialization, independent of A and V
        return y.copy()
    mixed = alpha * (a @ v)
    return y + mixed if residual else mixed


@dataclass(frozen=True, eq=False)
class GmaOutput:
    y_hat: np.ndarray
    attention: AttentionMatrix
    combined: FeatureMap


def effective_alpha(params: GmaParams, config: GmaConfig) -> float:
    return params.alpha if config.alpha_mode is AlphaMode.LEARNED else 1.0


def gma_attention(x: FeatureMap, params: GmaParams, config: GmaConfig) -> AttentionMatrix:
    """Attention over the reference frame; depends on ``x`` only, never on ``y``."""
    if x.channels != params.d_c:
        raise ShapeError(f"x has {x.channels} channels, params expect {params.d_c}")
    xf = flatten_hw(x)
    q, k = xf @ params.w_qry.T, xf @ params.w_key.T
    logits = attention_logits(q, k, (params.pos_v, params.pos_h), config.variant, x.height, x.width)
    return softmax_rows(logits)


def combine(y: FeatureMap, y_hat, x: FeatureMap, config: GmaConfig) -> FeatureMap:
    """``[y | y_hat | x]`` when concatenating, ``[y_hat | x]`` when replacing."""
    y_hat_map = unflatten_hw(y_hat, y.height, y.width)
    parts = [y_hat_map.data, x.data]
    if config.combine_mode is CombineMode.CONCATENATE:
        parts.insert(0, y.data)
    return FeatureMap(np.concatenate(parts, axis=2))


def gma_forward(x: FeatureMap, y: FeatureMap, params: GmaParams, config: GmaConfig) -> GmaOutput:
    _, _, v = project_qkv(x, y, params)
    attn = gma_attention(x, params, config)
    y_hat = aggregate(flatten_hw(y), attn, v, effective_alpha(params, config), config.residual)
    return GmaOutput(y_hat=y_hat, attention=attn, combined=combine(y, y_hat, x, config))


def gma_forward_tiled(x: FeatureMap, y: FeatureMap, params: GmaParams, config: GmaConfig, block: int = 256):
    """Aggregated features without materializing the N x N attention.

    Query rows are processed in blocks; for each block the key axis is
    swept in blocks with a running max / running normalizer (streaming
    softmax). Agrees with :func:`gma_forward` to floating-point
    reassociation error.
    """
    if block < 1:
        raise ValueError("block must be >= 1")
    q, k, v = project_qkv(x, y, params)
    yf = flatten_hw(y)
    alpha = effective_alpha(params, config)
    if config.residual and alpha == 0.0:
        return yf.copy()
    variant = config.variant
    if variant.uses_position:
        _check_table_range(x.height, x.width, params.pos_v, params.pos_h)
    n, scale = q.shape[0], 1.0 / math.sqrt(params.d_in)
    out = np.empty_like(v)
    for r0 in range(0, n, block):
        rows = np.arange(r0, min(r0 + block, n))
        run_max = np.full(len(rows), -np.inf)
        run_sum = np.zeros(len(rows))
        acc = np.zeros((len(rows), v.shape[1]))
        for c0 in range(0, n, block):
            cols = np.arange(c0, min(c0 + block, n))
            s = _logits_block(q[rows], k[cols], params.pos_v, params.pos_h, variant, x.width, rows, cols, scale)
            if not np.all(np.isfinite(s)):
                raise ValueError("non-finite attention logit")
            new_max = np.maximum(run_max, s.max(axis=1))
            rescale = np.exp(run_max - new_max)
            p = np.exp(s - new_max[:, None])
            run_sum = run_sum * rescale + p.sum(axis=1)
            acc = acc * rescale[:, None] + p @ v[cols]
            run_max = new_max
        out[rows] = acc / run_sum[:, None]
    mixed = alpha * out
    return yf + mixed if config.residual else mixed


@dataclass(frozen=True, eq=False)
class GmaGrads:
    """Gradients of ``sum(upstream * y_hat)``; ``dx``/``dy`` are ``N x D``."""

    dW_qry: np.ndarray
    dW_key: np.ndarray
    dW_val: np.ndarray
    d_alpha: float
    d_pos_v: np.ndarray
    d_pos_h: np.ndarray
    dx: np.ndarray
    dy: np.ndarray


def gma_backward(x: FeatureMap, y: FeatureMap, params: GmaParams, config: GmaConfig, upstream) -> GmaGrads:
    """Analytic gradients of ``L = sum(upstream * y_hat)``.

    With fixed alpha the scalar is not a parameter and ``d_alpha`` is 0.
    """
    variant = config.variant
    xf, yf = flatten_hw(x), flatten_hw(y)
    q, k, v = project_qkv(x, y, params)
    n, d_in = q.shape
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (n, params.d_m):
        raise ShapeError(f"upstream gradient must be {(n, params.d_m)}, got {g.shape}")
    scale = 1.0 / math.sqrt(d_in)
    a = gma_attention(x, params, config).weights
    alpha = effective_alpha(params, config)

    o = a @ v
    d_alpha = float(np.sum(g * o)) if config.alpha_mode is AlphaMode.LEARNED else 0.0
    d_o = alpha * g
    d_a = d_o @ v.T
    d_v = a.T @ d_o
    dW_val = d_v.T @ yf
    dy = d_v @ params.w_val
    if config.residual:
        dy = dy + g

    # softmax Jacobian applied row-wise: diag(a) - a a^T
    d_logit = a * (d_a - np.sum(d_a * a, axis=1, keepdims=True))
    d_s = d_logit * scale

    d_q = np.zeros((n, d_in))
    d_k = np.zeros((n, d_in))
    d_pos_v = np.zeros_like(params.pos_v)
    d_pos_h = np.zeros_like(params.pos_h)
    if variant.uses_content:
        d_q += d_s @ k
        d_k += d_s.T @ q
    if variant.uses_position:
        h_max, w_max = _check_table_range(x.height, x.width, params.pos_v, params.pos_h)
        idx = np.arange(n)
        dv_idx, dh_idx = _offset_table_index(idx, idx, x.width, h_max, w_max)
        for table, tidx, d_table in ((params.pos_v, dv_idx, d_pos_v), (params.pos_h, dh_idx, d_pos_h)):
            m = table.shape[0]
            # binned[i, t] = sum of d_s[i, j] over keys j whose offset lands in table row t
            flat = (idx[:, None] * m + tidx).ravel()
            binned = np.bincount(flat, weights=d_s.ravel(), minlength=n * m).reshape(n, m)
            d_q += binned @ table
            d_table += binned.T @ q

    dW_qry = d_q.T @ xf
    dW_key = d_k.T @ xf
    dx = d_q @ params.w_qry + d_k @ params.w_key
    return GmaGrads(dW_qry, dW_key, dW_val, d_alpha, d_pos_v, d_pos_h, dx, dy)
