"""Fusion of three same-shaped encoder views into one feature sequence.

Input layer: one encoder-fusion block (EFB) per view, a channel-fusion
block (CFB) and a shared FFN.  Each fusion layer: a private
convolutional block (PFEB) per stream, one shared attention block (SFEB),
a CFB and a shared FFN.  The result is the last layer's CFB output after
its FFN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from twincap import numerics as nx
from twincap.blocks import (
    FFN,
    AttentionConfig,
    BatchNorm1d,
    Conv1d,
    Conv2d,
    Linear,
    Module,
    MultiHeadAttention,
)
from twincap.numerics import Tensor


@dataclass
class FuserConfig:
    D: int = 64
    T: int = 8
    num_fusion_layers: int = 3
    sfeb_bottleneck: int | None = None  # None -> round(D / 3)
    cfb_kernel: int = 7
    pfeb_layers: int = 3
    pfeb_kernel: int = 3
    num_heads: int = 4
    ffn_mult: int = 4

    def __post_init__(self):
        if self.num_fusion_layers < 1:
            raise ValueError("num_fusion_layers must be >= 1")
        if self.cfb_kernel % 2 == 0 or self.pfeb_kernel % 2 == 0:
            raise ValueError("fuser kernel sizes must be odd")
        if self.sfeb_bottleneck is None:
            self.sfeb_bottleneck = max(1, round(self.D / 3))

    @classmethod
    def paper_scale(cls):
        return cls(D=768, T=32, sfeb_bottleneck=256, num_heads=8)


def _check_same(*streams: Tensor):
    shape = streams[0].shape
    for s in streams[1:]:
        if s.shape != shape:
            raise nx.ShapeError(f"stream shapes differ: {shape} vs {s.shape}")


def _heads_for(dim: int, preferred: int) -> int:
    h = min(preferred, dim)
    while dim % h:
        h -= 1
    return h


class EFB(Module):
    """``base + attn(base, other1) + attn(base, other2)`` with one attention module."""

    def __init__(self, cfg: FuserConfig, rng, dtype=np.float32):
        self.attn = MultiHeadAttention(AttentionConfig(cfg.D, cfg.num_heads), rng, dtype)

    def forward(self, base: Tensor, other1: Tensor, other2: Tensor) -> Tensor:
        _check_same(base, other1, other2)
        return base + self.attn(base, other1) + self.attn(base, other2)


class CFB(Module):
    """Stack streams as channels, reduce 3 -> 1 with a square 2-D kernel."""

    def __init__(self, kernel: int, rng, dtype=np.float32, num_streams: int = 3):
        self.conv = Conv2d(num_streams, 1, kernel, rng, dtype)

    def forward(self, streams) -> Tensor:
        _check_same(*streams)
        x = nx.stack(streams, axis=1)  # (B, 3, T, D)
        y = self.conv(x)  # (B, 1, T, D)
        B, _, T, D = y.shape
        return y.reshape(B, T, D)


class PFEB(Module):
    """Convolutions over time (channels = D) with BN + GELU between layers, plus residual."""

    def __init__(self, cfg: FuserConfig, rng, dtype=np.float32):
        self.convs = [Conv1d(cfg.D, cfg.D, cfg.pfeb_kernel, rng, dtype) for _ in range(cfg.pfeb_layers)]
        self.norms = [BatchNorm1d(cfg.D, dtype) for _ in range(cfg.pfeb_layers - 1)]

    def forward(self, stream: Tensor) -> Tensor:
        x = stream.swapaxes(1, 2)  # (B, D, T)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.norms):
                x = nx.gelu(self.norms[i](x))
        return stream + x.swapaxes(1, 2)


class SFEB(Module):
    """Self-attention across time plus bottlenecked self-attention across features."""

    def __init__(self, cfg: FuserConfig, rng, dtype=np.float32):
        self.time_attn = MultiHeadAttention(AttentionConfig(cfg.D, cfg.num_heads), rng, dtype)
        self.down = Linear(cfg.D, cfg.sfeb_bottleneck, rng, dtype)
        self.feat_attn = MultiHeadAttention(
            AttentionConfig(cfg.T, _heads_for(cfg.T, cfg.num_heads)), rng, dtype
        )
        self.up = Linear(cfg.sfeb_bottleneck, cfg.D, rng, dtype)

    def forward(self, stream: Tensor) -> Tensor:
        a = self.time_attn(stream, stream)
        z = self.down(stream).swapaxes(1, 2)  # (B, r, T): r tokens of length T
        b = self.up(self.feat_attn(z, z).swapaxes(1, 2))
        return stream + a + b


class FusionLayer(Module):
    def __init__(self, cfg: FuserConfig, rng, dtype=np.float32):
        self.pfebs = [PFEB(cfg, rng, dtype) for _ in range(3)]
        self.sfeb = SFEB(cfg, rng, dtype)
        self.cfb = CFB(cfg.cfb_kernel, rng, dtype)
        self.ffn = FFN(cfg.D, rng, cfg.ffn_mult, dtype)

    def forward(self, streams):
        streams = [self.ffn(p(s) + self.sfeb(s)) for p, s in zip(self.pfebs, streams)]
        fused = self.ffn(self.cfb(streams))
        return streams, fused


class Fuser(Module):
    def __init__(self, cfg: FuserConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.efbs = [EFB(cfg, rng, dtype) for _ in range(3)]
        self.input_cfb = CFB(cfg.cfb_kernel, rng, dtype)
        self.input_ffn = FFN(cfg.D, rng, cfg.ffn_mult, dtype)
        self.layers = [FusionLayer(cfg, rng, dtype) for _ in range(cfg.num_fusion_layers)]

    def input_layer(self, views):
        v1, v2, v3 = views
        streams = [
            self.input_ffn(self.efbs[0](v1, v2, v3)),
            self.input_ffn(self.efbs[1](v2, v1, v3)),
            self.input_ffn(self.efbs[2](v3, v1, v2)),
        ]
        return streams, self.input_ffn(self.input_cfb(streams))

    def forward(self, views) -> Tensor:
        if len(views) != 3:
            raise ValueError("fuser expects exactly three views")
        _check_same(*views)
        streams, fused = self.input_layer(views)
        for layer in self.layers:
            streams, fused = layer(streams)
        return fused


def fuser_forward(views, fuser: Fuser) -> Tensor:
    return fuser(views)
