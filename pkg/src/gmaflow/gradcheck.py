"""Central finite differences as an independent check on the GMA gradients."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import gma
from .core import FeatureMap

DEFAULT_STEP = 1e-5
PARAM_NAMES = ("W_qry", "W_key", "W_val", "alpha", "pos_v", "pos_h", "x", "y")


def finite_diff(loss_fn, params, h: float = DEFAULT_STEP) -> np.ndarray:
    """Gradient of a scalar function by ``(f(p + h e_k) - f(p - h e_k)) / 2h``.

    Raises:
        ValueError: if ``h <= 0`` or an evaluation is not finite.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    p = np.array(params, dtype=np.float64, copy=True)
    flat = p.reshape(-1)
    grad = np.empty(flat.size)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(loss_fn(p))
        flat[k] = orig - h
        fm = float(loss_fn(p))
        flat[k] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"non-finite loss near coordinate {k}")
        grad[k] = (fp - fm) / (2.0 * h)
    return grad.reshape(p.shape)


@dataclass
class ParamError:
    name: str
    max_abs: float
    max_rel: float
    argmax: tuple
    analytic_max: float


@dataclass
class GradReport:
    """Per-parameter errors; relative error uses ``max(|a|, |n|, 1e-8)`` elementwise."""

    entries: list
    threshold: float
    variant: str
    seed: int
    zero_grads: list = field(default_factory=list)

    @property
    def max_rel(self) -> float:
        return max(e.max_rel for e in self.entries)

    @property
    def passed(self) -> bool:
        return self.max_rel < self.threshold

    def entry(self, name: str) -> ParamError:
        return next(e for e in self.entries if e.name == name)

    def to_table(self) -> str:
        lines = [f"gradcheck variant={self.variant} seed={self.seed} threshold={self.threshold:g}",
                 f"{'param':<8} {'max abs err':>12} {'max rel err':>12} {'|grad| max':>12}  argmax"]
        for e in self.entries:
            lines.append(f"{e.name:<8} {e.max_abs:12.3e} {e.max_rel:12.3e} {e.analytic_max:12.3e}  {e.argmax}")
        if self.zero_grads:
            lines.append("identically zero: " + ", ".join(self.zero_grads))
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "threshold": self.threshold,
            "passed": self.passed,
            "max_rel": self.max_rel,
            "zero_grads": self.zero_grads,
            "params": {e.name: {"max_abs": e.max_abs, "max_rel": e.max_rel, "argmax": list(e.argmax)}
                       for e in self.entries},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def compare(name: str, analytic, numeric) -> ParamError:
    a = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    n = np.atleast_1d(np.asarray(numeric, dtype=np.float64))
    diff = np.abs(a - n)
    rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    k = int(np.argmax(rel))
    return ParamError(name, float(diff.max()), float(rel.max()), tuple(int(i) for i in np.unravel_index(k, a.shape)),
                      float(np.abs(a).max()))


def random_instance(height: int, width: int, d: int, seed: int, alpha: float | None = None):
    """Random ``(x, y, params, upstream)`` at ``D_in = D_c = D_m = d``.

    Projection weights are scaled so logits stay O(1); positional tables
    are random for the positional variants; alpha is drawn from [0.5, 1.5]
    unless given.
    """
    rng = np.random.default_rng(seed)
    x = FeatureMap(rng.standard_normal((height, width, d)))
    y = FeatureMap(rng.standard_normal((height, width, d)))
    s = 1.0 / math.sqrt(d)
    params = gma.GmaParams(
        w_qry=rng.uniform(-1, 1, (d, d)) * 2 * s,
        w_key=rng.uniform(-1, 1, (d, d)) * 2 * s,
        w_val=rng.uniform(-1, 1, (d, d)) * s,
        alpha=rng.uniform(0.5, 1.5) if alpha is None else alpha,
        pos_v=rng.standard_normal((2 * height - 1, d)) * 0.5,
        pos_h=rng.standard_normal((2 * width - 1, d)) * 0.5,
    )
    upstream = rng.standard_normal((height * width, d))
    return x, y, params, upstream


def _numeric_grads(x, y, params, config, upstream, h):
    def loss(xm, ym, p):
        out = gma.gma_forward(xm, ym, p, config)
        return float(np.sum(upstream * out.y_hat))

    hh, ww = x.height, x.width
    num = {}
    num["W_qry"] = finite_diff(lambda w: loss(x, y, params.replace(w_qry=w)), params.w_qry, h)
    num["W_key"] = finite_diff(lambda w: loss(x, y, params.replace(w_key=w)), params.w_key, h)
    num["W_val"] = finite_diff(lambda w: loss(x, y, params.replace(w_val=w)), params.w_val, h)
    num["alpha"] = finite_diff(lambda a: loss(x, y, params.replace(alpha=a[0])), np.array([params.alpha]), h)
    num["pos_v"] = finite_diff(lambda t: loss(x, y, params.replace(pos_v=t)), params.pos_v, h)
    num["pos_h"] = finite_diff(lambda t: loss(x, y, params.replace(pos_h=t)), params.pos_h, h)
    num["x"] = finite_diff(lambda a: loss(FeatureMap(a), y, params), x.data, h).reshape(hh * ww, -1)
    num["y"] = finite_diff(lambda a: loss(x, FeatureMap(a), params), y.data, h).reshape(hh * ww, -1)
    return num


def analytic_grads(grads: gma.GmaGrads) -> dict:
    return {
        "W_qry": grads.dW_qry,
        "W_key": grads.dW_key,
        "W_val": grads.dW_val,
        "alpha": np.array([grads.d_alpha]),
        "pos_v": grads.d_pos_v,
        "pos_h": grads.d_pos_h,
        "x": grads.dx,
        "y": grads.dy,
    }


def check_gma(
    height: int = 3,
    width: int = 3,
    d: int = 4,
    variant=gma.Variant.CONTENT,
    seed: int = 0,
    threshold: float = 1e-4,
    h: float = DEFAULT_STEP,
    config: gma.GmaConfig | None = None,
) -> GradReport:
    """Compare :func:`gma.gma_backward` to finite differences on a random instance."""
    variant = gma.Variant(variant)
    if height * width > 16 or d > 8:
        raise ValueError("gradcheck is meant for desk-scale instances (N <= 16, D <= 8)")
    if config is None:
        config = gma.GmaConfig(variant=variant, d_in=d, d_c=d, d_m=d)
    variant = config.variant
    x, y, params, upstream = random_instance(height, width, d, seed)
    analytic = analytic_grads(gma.gma_backward(x, y, params, config, upstream))
    numeric = _numeric_grads(x, y, params, config, upstream, h)
    entries = [compare(name, analytic[name], numeric[name]) for name in PARAM_NAMES]
    zero = [name for name in PARAM_NAMES if not np.any(analytic[name])]
    return GradReport(entries, threshold, variant.value, seed, zero)
