"""Hierarchical transformer encoder with edge-guided symmetric cross-attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ConfigError, ModelConfig
from .nn import Conv2d, LayerNorm, Linear, Module, to_map, to_tokens
from .numerics import ShapeError, Tensor
from .numerics import functional as F


@dataclass(frozen=True)
class StageConfig:
    channels: int
    depth: int
    heads: int
    reduction: int
    kernel: int
    stride: int
    pad: int

    def __post_init__(self):
        if self.channels % self.heads:
            raise ConfigError(f"{self.channels} channels not divisible by {self.heads} heads")
        if self.reduction < 1:
            raise ConfigError("reduction ratio must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


def stage_configs(cfg: ModelConfig) -> list[StageConfig]:
    return [
        StageConfig(c, d, h, r, k, s, p)
        for c, d, h, r, k, s, p in zip(cfg.enc_channels, cfg.enc_depths, cfg.enc_heads, cfg.sr_ratios,
                                       cfg.patch_kernels, cfg.patch_strides, cfg.patch_pads)
    ]


class OverlapPatchEmbed(Module):
    """Strided conv tokenizer followed by LayerNorm over channels."""

    def __init__(self, rng, c_in: int, c_out: int, kernel: int, stride: int, pad: int):
        self.proj = Conv2d(rng, c_in, c_out, kernel, stride, pad)
        self.norm = LayerNorm(c_out)
        self.stride, self.kernel, self.pad = stride, kernel, pad

    def forward(self, x: Tensor) -> tuple[Tensor, int, int]:
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ShapeError(f"patch stride {self.stride} does not divide input {h}x{w}")
        y = self.proj(x)
        ho, wo = y.shape[-2:]
        return self.norm(to_tokens(y)), ho, wo


class Attention(Module):
    """Multi-head scaled dot-product attention.

    Queries come from ``x``; keys and values from ``context`` (``x`` itself for
    self-attention), optionally spatially reduced by an RxR strided conv + LayerNorm.
    """

    def __init__(self, rng, dim: int, heads: int, reduction: int = 1, zero_proj: bool = False):
        if dim % heads:
            raise ConfigError(f"{dim} channels not divisible by {heads} heads")
        self.heads, self.reduction = heads, reduction
        self.scale = 1.0 / math.sqrt(dim // heads)
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim, zero=zero_proj)
        if reduction > 1:
            self.sr = Conv2d(rng, dim, dim, reduction, reduction, 0)
            self.sr_norm = LayerNorm(dim)
        self.last_weights: np.ndarray | None = None

    def _split(self, t: Tensor) -> Tensor:
        n, length, c = t.shape
        d = c // self.heads
        t = F.transpose(F.reshape(t, (n, length, self.heads, d)), (0, 2, 1, 3))
        return F.reshape(t, (n * self.heads, length, d))

    def forward(self, x: Tensor, hw: tuple[int, int], context: Tensor | None = None,
                context_hw: tuple[int, int] | None = None) -> Tensor:
        if context is None:
            context, context_hw = x, hw
        n, tq, c = x.shape
        if self.reduction > 1:
            h, w = context_hw
            if h % self.reduction or w % self.reduction:
                raise ConfigError(f"reduction ratio {self.reduction} does not divide token grid {h}x{w}")
            context = self.sr_norm(to_tokens(self.sr(to_map(context, h, w))))
        q = self._split(self.q(x))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        scores = F.mul(F.matmul(q, F.transpose(k, (0, 2, 1))), self.scale)
        attn = F.softmax(scores, axis=-1)
        self.last_weights = attn.data
        out = F.matmul(attn, v)                                  # (n*heads, tq, d)
        out = F.reshape(F.transpose(F.reshape(out, (n, self.heads, tq, c // self.heads)), (0, 2, 1, 3)), (n, tq, c))
        return self.proj(out)


class FeedForward(Module):
    def __init__(self, rng, dim: int, ratio: int = 4):
        self.fc1 = Linear(rng, dim, dim * ratio)
        self.fc2 = Linear(rng, dim * ratio, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(Module):
    def __init__(self, rng, sc: StageConfig, mlp_ratio: int):
        self.norm1 = LayerNorm(sc.channels)
        self.attn = Attention(rng, sc.channels, sc.heads, sc.reduction)
        self.norm2 = LayerNorm(sc.channels)
        self.ffn = FeedForward(rng, sc.channels, mlp_ratio)

    def forward(self, x: Tensor, hw) -> Tensor:
        x = F.add(x, self.attn(self.norm1(x), hw))
        return F.add(x, self.ffn(self.norm2(x)))


class EncoderStage(Module):
    def __init__(self, rng, c_in: int, sc: StageConfig, mlp_ratio: int):
        self.embed = OverlapPatchEmbed(rng, c_in, sc.channels, sc.kernel, sc.stride, sc.pad)
        self.blocks = [Block(rng, sc, mlp_ratio) for _ in range(sc.depth)]
        self.norm = LayerNorm(sc.channels)

    def forward(self, x: Tensor) -> tuple[Tensor, int, int]:
        tokens, h, w = self.embed(x)
        for blk in self.blocks:
            tokens = blk(tokens, (h, w))
        return self.norm(tokens), h, w


class SymmetricCrossAttention(Module):
    """F + Attn(q=edges, kv=F) + Attn(q=F, kv=edges).

    The edge map is tokenized by its own overlap patch embedding whose stride
    matches the feature grid (kernel 2s-1, pad s-1: the 7/4/3 geometry at s=4).
    Both output projections start at zero, so at initialisation the block is
    the identity on F and the model starts from the plain encoder.
    """

    def __init__(self, rng, dim: int, heads: int, stride: int):
        self.edge_embed = OverlapPatchEmbed(rng, 1, dim, 2 * stride - 1, stride, stride - 1)
        self.edge_to_feat = Attention(rng, dim, heads, zero_proj=True)
        self.feat_to_edge = Attention(rng, dim, heads, zero_proj=True)

    def embed_edges(self, edges: Tensor) -> tuple[Tensor, int, int]:
        return self.edge_embed(edges)

    def forward(self, feats: Tensor, hw: tuple[int, int], edges: Tensor) -> Tensor:
        e_tok, eh, ew = self.embed_edges(edges)
        if (eh, ew) != tuple(hw):
            raise ShapeError(f"embedded edge grid {eh}x{ew} does not match feature grid {hw[0]}x{hw[1]}")
        return self.fuse_tokens(feats, e_tok, hw)

    def fuse_tokens(self, feats: Tensor, e_tok: Tensor, hw) -> Tensor:
        f_ev = self.edge_to_feat(e_tok, hw, context=feats, context_hw=hw)
        f_te = self.feat_to_edge(feats, hw, context=e_tok, context_hw=hw)
        return F.add(F.add(f_ev, f_te), feats)


@dataclass
class EncoderOutputs:
    stages: list  # four N x C_i x H_i x W_i tensors; stage 1 is the fused one when guidance is on
    pre_fusion: Tensor | None = None

    @property
    def s1_fused(self) -> Tensor:
        return self.stages[0]


class EdgeGuidedEncoder(Module):
    def __init__(self, rng, cfg: ModelConfig, in_channels: int = 3):
        self.cfg = cfg
        self.stage_cfgs = stage_configs(cfg)
        stages, c_prev = [], in_channels
        for sc in self.stage_cfgs:
            stages.append(EncoderStage(rng, c_prev, sc, cfg.mlp_ratio))
            c_prev = sc.channels
        self.stages = stages
        if in_channels > 3:
            # extra (edge) input channels start at zero and the RGB slice gets the
            # 3-channel init scale, so the model starts as the plain encoder
            w = stages[0].embed.proj.weight.data
            w[:, :3] *= math.sqrt(in_channels / 3)
            w[:, 3:] = 0
        if cfg.edge_guidance:
            k = cfg.fusion_stage - 1
            stride = int(np.prod(cfg.patch_strides[: k + 1]))
            self.cross = SymmetricCrossAttention(rng, cfg.enc_channels[k], cfg.enc_heads[k], stride)

    def forward(self, x: Tensor, edges: Tensor | None = None, guidance: bool | None = None) -> EncoderOutputs:
        guidance = self.cfg.edge_guidance if guidance is None else guidance
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"encoder input {h}x{w} must have sides divisible by 32")
        if guidance and edges is None:
            raise ValueError("edge guidance requires an edge map")
        outs, pre = [], None
        y = x
        for i, stage in enumerate(self.stages):
            tokens, sh, sw = stage(y)
            if guidance and i == self.cfg.fusion_stage - 1:
                pre = to_map(tokens, sh, sw)
                tokens = self.cross(tokens, (sh, sw), edges)
            y = to_map(tokens, sh, sw)
            outs.append(y)
        return EncoderOutputs(outs, pre)
