"""Flow evaluation: end-point error, outlier rate, occlusion regions, reports.

Region averages over an empty pixel set return ``None`` instead of NaN.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from .core import FlowField, ShapeError


class Region(enum.IntEnum):
    """Per-pixel occlusion category; the values are the on-disk codes."""

    NOC = 0
    OCC_IN = 1
    OCC_OUT = 2
    INVALID = 255


REGION_ORDER = ("Noc", "Occ", "Occ-in", "Occ-out", "All")


def _check_pair(pred: FlowField, gt: FlowField):
    if pred.uv.shape != gt.uv.shape:
        raise ShapeError(f"flow shapes differ: {pred.uv.shape} vs {gt.uv.shape}")


def epe_map(pred: FlowField, gt: FlowField) -> np.ndarray:
    _check_pair(pred, gt)
    d = pred.uv - gt.uv
    return np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)


def _mask(gt: FlowField, mask):
    m = np.ones(gt.uv.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != gt.uv.shape[:2]:
        raise ShapeError(f"mask {m.shape} does not match flow {gt.uv.shape[:2]}")
    return m & gt.valid


def aepe(pred: FlowField, gt: FlowField, mask=None) -> float | None:
    """Mean EPE over ``mask`` (restricted to valid ground truth); ``None`` if empty."""
    e = epe_map(pred, gt)
    m = _mask(gt, mask)
    if not m.any():
        return None
    return float(e[m].mean())


def _outliers(pred, gt, mask, combine):
    e = epe_map(pred, gt)
    m = _mask(gt, mask)
    if not m.any():
        return None
    mag = np.sqrt(gt.uv[..., 0] ** 2 + gt.uv[..., 1] ** 2)
    bad = combine(e > 3.0, e > 0.05 * mag)
    return 100.0 * float(np.count_nonzero(bad & m)) / float(np.count_nonzero(m))


def fl_all_paper(pred: FlowField, gt: FlowField, mask=None) -> float | None:
    """Outlier percentage where EPE > 3 px *or* EPE > 5% of |gt|."""
    return _outliers(pred, gt, mask, np.logical_or)


def fl_all_kitti(pred: FlowField, gt: FlowField, mask=None) -> float | None:
    """Outlier percentage where EPE > 3 px *and* EPE > 5% of |gt| (KITTI devkit rule)."""
    return _outliers(pred, gt, mask, np.logical_and)


fl_all = fl_all_paper


def partition_occlusion(occ, gt: FlowField) -> np.ndarray:
    """Split pixels into Noc / Occ-in / Occ-out / Invalid codes.

    An occluded pixel is in-frame when its target, pixel centre
    ``(c + 0.5 + u, r + 0.5 + v)``, satisfies ``0 <= x < W`` and ``0 <= y < H``.
    """
    occ = np.asarray(occ, dtype=bool)
    h, w = gt.uv.shape[:2]
    if occ.shape != (h, w):
        raise ShapeError(f"occlusion map {occ.shape} does not match flow {(h, w)}")
    rows, cols = np.mgrid[0:h, 0:w]
    with np.errstate(invalid="ignore"):
        tx = cols + 0.5 + gt.u
        ty = rows + 0.5 + gt.v
        inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    out = np.full((h, w), Region.NOC, dtype=np.uint8)
    out[occ & inside] = Region.OCC_IN
    out[occ & ~inside] = Region.OCC_OUT
    out[~gt.valid] = Region.INVALID
    return out


def epe_unmatched(pred: FlowField, gt: FlowField, occ) -> float | None:
    """AEPE over pixels visible in the reference frame only."""
    return aepe(pred, gt, np.asarray(occ, dtype=bool))


def relative_improvement(baseline: float, ours: float) -> float:
    """Percent reduction from ``baseline`` to ``ours``, rounded to one decimal."""
    if not baseline > 0:
        raise ValueError(f"baseline must be positive, got {baseline}")
    return round(100.0 * (baseline - ours) / baseline, 1)


@dataclass
class EvalReport:
    """Per-region AEPE and pixel counts plus the outlier rate over all valid pixels."""

    aepe: dict
    counts: dict
    fl_all: float | None
    fl_all_paper: float | None
    has_occlusion: bool = True

    def to_dict(self) -> dict:
        regions = {name: {"aepe": self.aepe[name], "count": self.counts[name]} for name in self.region_names()}
        return {"regions": regions, "fl_all": self.fl_all, "fl_all_paper": self.fl_all_paper}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        regions = doc["regions"]
        return cls(
            aepe={k: v["aepe"] for k, v in regions.items()},
            counts={k: int(v["count"]) for k, v in regions.items()},
            fl_all=doc.get("fl_all"),
            fl_all_paper=doc.get("fl_all_paper"),
            has_occlusion="Occ" in regions,
        )

    def region_names(self):
        return REGION_ORDER if self.has_occlusion else ("All",)

    def to_table(self, baseline: "EvalReport | None" = None) -> str:
        """Plain-text table: region, AEPE, pixel count, and optionally the
        baseline AEPE and relative improvement."""
        head = ["Region", "AEPE", "Pixels"]
        if baseline is not None:
            head = ["Region", "Baseline", "AEPE", "Rel. Impr. (%)", "Pixels"]
        rows = []
        for name in self.region_names():
            ours = self.aepe.get(name)
            if baseline is None:
                rows.append([name, _fmt(ours), str(self.counts[name])])
                continue
            base = baseline.aepe.get(name)
            impr = "-" if base is None or ours is None or base <= 0 else f"{relative_improvement(base, ours):.1f}"
            rows.append([name, _fmt(base), _fmt(ours), impr, str(self.counts[name])])
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        line = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
        out = [line(head), line(["-" * w for w in widths])] + [line(r) for r in rows]
        out.append(f"Fl-all: {_fmt(self.fl_all, '.2f')}%  (either-threshold reading: {_fmt(self.fl_all_paper, '.2f')}%)")
        return "\n".join(out) + "\n"


def _fmt(value, spec=".3f") -> str:
    return "n/a (empty)" if value is None else format(value, spec)


def evaluate(pred: FlowField, gt: FlowField, occ=None) -> EvalReport:
    """Full report; without an occlusion map only the All region is filled."""
    _check_pair(pred, gt)
    valid = gt.valid
    if occ is None:
        return EvalReport(
            aepe={"All": aepe(pred, gt, valid)},
            counts={"All": int(valid.sum())},
            fl_all=fl_all_kitti(pred, gt),
            fl_all_paper=fl_all_paper(pred, gt),
            has_occlusion=False,
        )
    part = partition_occlusion(occ, gt)
    masks = {
        "Noc": part == Region.NOC,
        "Occ": (part == Region.OCC_IN) | (part == Region.OCC_OUT),
        "Occ-in": part == Region.OCC_IN,
        "Occ-out": part == Region.OCC_OUT,
        "All": part != Region.INVALID,
    }
    return EvalReport(
        aepe={k: aepe(pred, gt, m) for k, m in masks.items()},
        counts={k: int(m.sum()) for k, m in masks.items()},
        fl_all=fl_all_kitti(pred, gt),
        fl_all_paper=fl_all_paper(pred, gt),
    )
