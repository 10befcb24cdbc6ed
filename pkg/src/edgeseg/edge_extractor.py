"""Text edge extractor: light residual detector, area-mask head, edge filtering."""

from __future__ import annotations

import math

import numpy as np

from .nn import Conv2d, Module
from .numerics import ShapeError, Tensor, as_tensor
from .numerics import functional as F

RELU_GAIN = math.sqrt(2.0)


class PreActBlock(Module):
    """relu -> conv3x3 -> relu -> conv3x3, plus (projected) identity."""

    def __init__(self, rng, c_in: int, c_out: int, stride: int = 1):
        self.conv1 = Conv2d(rng, c_in, c_out, 3, stride, 1, gain=RELU_GAIN)
        # damped so eight stacked residual branches keep activations in range
        self.conv2 = Conv2d(rng, c_out, c_out, 3, 1, 1, gain=0.5)
        self.shortcut = Conv2d(rng, c_in, c_out, 1, stride, 0, bias=False) if (stride != 1 or c_in != c_out) else None

    def forward(self, x: Tensor) -> Tensor:
        pre = F.relu(x)
        skip = self.shortcut(pre) if self.shortcut is not None else x
        return F.add(skip, self.conv2(F.relu(self.conv1(pre))))


class DetectorBackbone(Module):
    """ResNet-like backbone: 7x7/2 stem, 3x3/2 max-pool, four stages of two blocks.

    Output strides are 4, 8, 16 and 32.
    """

    def __init__(self, rng, channels=(16, 32, 64, 128), in_channels: int = 3):
        self.stem = Conv2d(rng, in_channels, channels[0], 7, 2, 3, gain=RELU_GAIN)
        stages = []
        c_prev = channels[0]
        for i, c in enumerate(channels):
            stride = 1 if i == 0 else 2
            stages.append(_Stage([PreActBlock(rng, c_prev, c, stride), PreActBlock(rng, c, c, 1)]))
            c_prev = c
        self.stages = stages
        self.channels = tuple(channels)

    def forward(self, x: Tensor) -> list[Tensor]:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"detector input {h}x{w} must have sides divisible by 32")
        y = F.max_pool2d(self.stem(x), 3, 2, 1)
        feats = []
        for stage in self.stages:
            y = stage(y)
            feats.append(y)
        return feats


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


class DetectionHead(Module):
    """Upsample stages 2-4 to stage-1 size, concatenate, 1x1 conv to two logits."""

    def __init__(self, rng, channels=(16, 32, 64, 128)):
        self.conv = Conv2d(rng, sum(channels), 2, 1)

    def forward(self, feats: list[Tensor]) -> Tensor:
        if len(feats) != 4:
            raise ShapeError(f"detection head needs 4 feature stages, got {len(feats)}")
        h, w = feats[0].shape[-2:]
        ups = [feats[0]] + [F.bilinear_resize(f, h, w) for f in feats[1:]]
        return self.conv(F.concat(ups, axis=-3))


def area_probs(logits: Tensor) -> Tensor:
    """Per-pixel softmax over the two area-mask logits (channel 1 = text)."""
    return F.softmax(logits, axis=-3)


def soft_argmax(edges, temperature: float = 1.0) -> Tensor:
    """Edge-channel probability of the two-logit field (v/T, (1-v)/T).

    Equals ``sigmoid((2v - 1) / T)``; tends to the binary input as T -> 0.
    Differentiable if ``edges`` is an attached tensor.
    """
    if temperature <= 0:
        raise ValueError(f"soft-argmax temperature must be > 0, got {temperature}")
    e = as_tensor(edges)
    return F.sigmoid(F.add(F.mul(e, 2.0 / temperature), -1.0 / temperature))


def filter_edges(e_soft: Tensor, fg: Tensor) -> Tensor:
    """Pointwise product of soft edges and the text-area probability.

    ``fg`` is bilinearly resized to the edge map's resolution first.
    """
    fg = as_tensor(fg)
    h, w = e_soft.shape[-2:]
    if fg.ndim != e_soft.ndim:
        raise ShapeError(f"edge map {e_soft.shape} and area mask {fg.shape} differ in rank")
    fg_up = F.bilinear_resize(fg, h, w)
    return F.mul(fg_up, e_soft)


class TextEdgeExtractor(Module):
    def __init__(self, rng, channels=(16, 32, 64, 128)):
        self.backbone = DetectorBackbone(rng, channels)
        self.head = DetectionHead(rng, channels)

    def forward(self, x: Tensor) -> Tensor:
        """Area-mask logits, ``N x 2 x H/4 x W/4``."""
        return self.head(self.backbone(x))


def text_edges(raw_edges: np.ndarray, det_logits: Tensor | None, temperature: float, filtering: bool) -> dict:
    """Soft edges and, with ``filtering``, their product with the area mask.

    ``raw_edges`` is the ``N x H x W`` binary Canny map.
    """
    e_soft = soft_argmax(Tensor(np.asarray(raw_edges)[:, None]), temperature)
    out = {"edge_soft": e_soft}
    if filtering:
        if det_logits is None:
            raise ValueError("edge filtering needs area-mask logits")
        fg = F.getitem(area_probs(det_logits), (slice(None), slice(1, 2)))
        out["area_fg"] = fg
        out["edges"] = filter_edges(e_soft, fg)
    else:
        out["edges"] = e_soft
    return out
