"""All-MLP segmentation decoder, box supervision and the joint objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .nn import Linear, Module, to_map, to_tokens
from .numerics import ShapeError, Tensor
from .numerics import functional as F


class MLPDecoder(Module):
    """Per-stage linear maps to C1, upsample to stage-1 size, concat + fuse, classify.

    The fuse step is a linear reduction 4*C1 -> C1 followed by GELU.
    """

    def __init__(self, rng, channels=(32, 64, 160, 256), n_classes: int = 2):
        c1 = channels[0]
        self.embeds = [Linear(rng, c, c1) for c in channels]
        self.fuse = Linear(rng, 4 * c1, c1)
        self.classify = Linear(rng, c1, n_classes)

    def forward(self, stages: list[Tensor], out_hw: tuple[int, int]) -> Tensor:
        if len(stages) != 4 or any(s is None for s in stages):
            raise ShapeError("decoder needs all four stage outputs")
        h1, w1 = stages[0].shape[-2:]
        ups = []
        for feat, embed in zip(stages, self.embeds):
            h, w = feat.shape[-2:]
            y = to_map(embed(to_tokens(feat)), h, w)
            ups.append(F.bilinear_resize(y, h1, w1))
        fused = F.gelu(self.fuse(to_tokens(F.concat(ups, axis=1))))
        logits = to_map(self.classify(fused), h1, w1)
        return F.bilinear_resize(logits, *out_hw)


def derive_box_mask(text_mask: np.ndarray) -> np.ndarray:
    """Union of the filled bounding boxes of the mask's 8-connected components."""
    m = np.asarray(text_mask).astype(bool)
    out = np.zeros_like(m)
    if not m.any():
        return out
    labels, _ = ndimage.label(m, structure=np.ones((3, 3), dtype=bool))
    for sl in ndimage.find_objects(labels):
        if sl is not None:
            out[sl] = True
    return out


def nearest_downsample(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes with half-pixel centres."""
    h, w = mask.shape[-2:]
    ys = np.minimum(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    xs = np.minimum(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return mask[..., ys[:, None], xs[None, :]]


@dataclass
class LossReport:
    total: float
    seg: float
    det: float
    lam: float

    def as_dict(self) -> dict:
        return {"total": self.total, "seg": self.seg, "det": self.det, "lambda": self.lam}


def _check_binary(mask: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} ground truth must be binary")
        m = m.astype(bool)
    return m


def joint_loss(seg_logits: Tensor, det_logits: Tensor | None, text_mask: np.ndarray,
               area_mask: np.ndarray | None, lam: float = 1.0) -> tuple[Tensor, LossReport]:
    """seg CE at full resolution + lam * det CE at detector resolution.

    ``area_mask`` is the full-resolution box mask; it is nearest-downsampled to
    the detector grid. With ``det_logits`` None (no detector branch) the det
    term is zero.
    """
    text = _check_binary(text_mask, "text mask")
    if seg_logits.shape[-2:] != text.shape[-2:]:
        raise ShapeError(f"seg logits {seg_logits.shape} vs text mask {text.shape}")
    seg = F.cross_entropy(seg_logits, text.astype(np.intp), axis=1)
    if det_logits is None:
        return seg, LossReport(seg.item(), seg.item(), 0.0, lam)
    area = _check_binary(area_mask, "area mask")
    target = nearest_downsample(area, *det_logits.shape[-2:])
    det = F.cross_entropy(det_logits, target.astype(np.intp), axis=1)
    total = F.add(seg, F.mul(det, float(lam)))
    return total, LossReport(total.item(), seg.item(), det.item(), lam)


def predict_mask(seg_logits: Tensor | np.ndarray) -> np.ndarray:
    """Per-pixel argmax; ties go to background."""
    z = seg_logits.data if isinstance(seg_logits, Tensor) else np.asarray(seg_logits)
    return z[:, 1] > z[:, 0]
