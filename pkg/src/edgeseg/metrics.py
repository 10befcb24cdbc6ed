"""Foreground IoU / F-score with global pixel accumulation, and edge-band variants.

Conventions: fgIoU is a percentage, F-score a decimal. Counts are summed over
the whole dataset before any ratio is taken. When prediction and ground truth
are both empty the agreement is perfect (IoU 100, P = R = F = 1); a
precision or recall with an empty denominator is otherwise 0.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

ACCUMULATION = "global"


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(pred), np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    for name, m in (("prediction", p), ("ground truth", g)):
        if m.dtype != bool and not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} mask must be binary")
    return p.astype(bool), g.astype(bool)


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    pixels: int = 0

    def update(self, pred, gt, where=None) -> "Counts":
        p, g = _pair(pred, gt)
        if where is not None:
            sel = np.asarray(where, dtype=bool)
            p, g = p[sel], g[sel]
        self.tp += int(np.count_nonzero(p & g))
        self.fp += int(np.count_nonzero(p & ~g))
        self.fn += int(np.count_nonzero(~p & g))
        self.pixels += int(p.size)
        return self

    def merge(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.pixels + other.pixels)

    @property
    def iou(self) -> float:
        union = self.tp + self.fp + self.fn
        return 100.0 if union == 0 else 100.0 * self.tp / union

    @property
    def precision(self) -> float:
        if self.tp + self.fp == 0:
            return 1.0 if self.fn == 0 else 0.0
        return self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float:
        if self.tp + self.fn == 0:
            return 1.0 if self.fp == 0 else 0.0
        return self.tp / (self.tp + self.fn)

    @property
    def f_score(self) -> float:
        if self.tp + self.fp + self.fn == 0:
            return 1.0
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def fg_iou(pred, gt) -> float:
    return Counts().update(pred, gt).iou


def f_score(pred, gt) -> tuple[float, float, float]:
    """(precision, recall, F)."""
    c = Counts().update(pred, gt)
    return c.precision, c.recall, c.f_score


def boundary(gt: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 8-neighbour (image border excluded)."""
    g = np.asarray(gt, dtype=bool)
    eroded = ndimage.binary_erosion(g, structure=np.ones((3, 3), bool), border_value=1)
    return g & ~eroded


def edge_band(gt: np.ndarray, radius: int) -> np.ndarray:
    """Pixels within Chebyshev distance ``radius`` of a ground-truth boundary pixel."""
    if radius < 1:
        raise ValueError("band radius must be >= 1")
    b = boundary(gt)
    if not b.any():
        return b
    return ndimage.binary_dilation(b, structure=np.ones((2 * radius + 1, 2 * radius + 1), bool))


def default_band_radius(size: int) -> int:
    """2 px at 64 x 64, scaled linearly with resolution."""
    return max(1, round(2 * size / 64))


@dataclass
class MetricReport:
    fgIoU: float
    f_score: float
    precision: float
    recall: float
    edge_fgIoU: float | None
    edge_f_score: float | None
    band_pixels: int
    band_radius: int
    images: int
    accumulation: str = ACCUMULATION

    @property
    def band_empty(self) -> bool:
        return self.band_pixels == 0

    def to_text(self) -> str:
        lines = [f"# accumulation={self.accumulation} fgIoU=percent f_score=decimal"]
        for k, v in asdict(self).items():
            if k == "accumulation":
                continue
            lines.append(f"{k}={_fmt(v)}")
        lines.append(f"band_empty={str(self.band_empty).lower()}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        d = asdict(self)
        d["band_empty"] = self.band_empty
        return json.dumps(d, indent=2, sort_keys=True)


def _fmt(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


class Evaluator:
    """Accumulates global and edge-band counts over a stream of (pred, gt) masks."""

    def __init__(self, band_radius: int | None = None):
        self.band_radius = band_radius
        self.global_counts = Counts()
        self.band_counts = Counts()
        self.images = 0

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        p, g = _pair(pred, gt)
        if p.ndim == 2:
            p, g = p[None], g[None]
        for pi, gi in zip(p, g):
            radius = self.band_radius or default_band_radius(gi.shape[0])
            self.band_radius = radius
            self.global_counts.update(pi, gi)
            self.band_counts.update(pi, gi, edge_band(gi, radius))
            self.images += 1

    def report(self) -> MetricReport:
        g, b = self.global_counts, self.band_counts
        empty = b.pixels == 0
        return MetricReport(
            fgIoU=g.iou, f_score=g.f_score, precision=g.precision, recall=g.recall,
            edge_fgIoU=None if empty else b.iou, edge_f_score=None if empty else b.f_score,
            band_pixels=b.pixels, band_radius=self.band_radius or 0, images=self.images,
        )


def edge_band_metrics(pred, gt, band_radius: int) -> MetricReport:
    """Metrics restricted to the edge band around ``gt``'s boundary."""
    ev = Evaluator(band_radius)
    ev.update(pred, gt)
    return ev.report()
