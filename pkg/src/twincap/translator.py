"""Step-wise alignment network with chained hidden states.

The input ``(B, T, D)`` is split into ``T`` vectors.  Each encoder layer runs
a context block (conv over D, then attention to the previous hidden state)
and a global block (attention to the unsplit input) per step; the global
block's output becomes the next hidden state.  Decoder layers add a
same-step cross-attention to the final encoder output and start from the
encoder's last hidden state.  Per-step outputs are re-concatenated.

Work that does not depend on the recurrence (the context conv, key/value
projections of fixed sequences, the FFN) is batched over all steps at once;
this is numerically the same as running it step by step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from twincap import numerics as nx
from twincap.blocks import FFN, AttentionConfig, Conv1d, LayerNorm, Module, MultiHeadAttention
from twincap.numerics import Tensor


@dataclass
class TranslatorConfig:
    D: int = 64
    T: int = 8
    M: int = 3
    N: int = 2
    cab_kernel: int = 9
    num_heads: int = 4
    ffn_mult: int = 4

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ValueError("M and N must be >= 1")
        if self.cab_kernel % 2 == 0:
            raise ValueError("cab_kernel must be odd")

    @classmethod
    def paper_scale(cls):
        return cls(D=768, T=32, cab_kernel=45, num_heads=8)


@dataclass
class TranslatorState:
    per_step_hidden: list = field(default_factory=list)  # per layer: Tensor (B, T, D)
    last_hidden: Tensor | None = None


def split_time(X: Tensor) -> list:
    return [X[:, n, :] for n in range(X.shape[1])]


def concat_time(steps) -> Tensor:
    return nx.stack(steps, axis=1)


def _as_seq(v: Tensor) -> Tensor:
    B, D = v.shape
    return v.reshape(B, 1, D)


class CAB(Module):
    """conv over D of the step input, attention to the previous hidden, residual LN."""

    def __init__(self, cfg: TranslatorConfig, rng, dtype=np.float32):
        self.conv = Conv1d(1, 1, cfg.cab_kernel, rng, dtype)
        self.attn = MultiHeadAttention(AttentionConfig(cfg.D, cfg.num_heads), rng, dtype)
        self.norm = LayerNorm(cfg.D, dtype)

    def conv_steps(self, X: Tensor) -> Tensor:
        """Apply the conv to every step of ``X (B, T, D)`` at once."""
        B, T, D = X.shape
        return self.conv(X.reshape(B * T, 1, D)).reshape(B, T, D)

    def step(self, c: Tensor, h_prev: Tensor) -> Tensor:
        B, D = c.shape
        a = self.attn(_as_seq(c), _as_seq(h_prev)).reshape(B, D)
        return self.norm(c + a)

    def forward(self, x_t: Tensor, h_prev: Tensor) -> Tensor:
        if x_t.shape != h_prev.shape:
            raise nx.ShapeError(f"cab: x {x_t.shape} vs h {h_prev.shape}")
        B, D = x_t.shape
        c = self.conv(x_t.reshape(B, 1, D)).reshape(B, D)
        return self.step(c, h_prev)


class GAB(Module):
    """Attention from one step to the full unsplit input, residual LN."""

    def __init__(self, cfg: TranslatorConfig, rng, dtype=np.float32):
        self.attn = MultiHeadAttention(AttentionConfig(cfg.D, cfg.num_heads), rng, dtype)
        self.norm = LayerNorm(cfg.D, dtype)

    def step(self, y_t: Tensor, kv) -> Tensor:
        B, D = y_t.shape
        a = self.attn.attend(_as_seq(y_t), *kv).reshape(B, D)
        return self.norm(y_t + a)

    def forward(self, y_t: Tensor, X_full: Tensor):
        if y_t.shape != (X_full.shape[0], X_full.shape[2]):
            raise nx.ShapeError(f"gab: y {y_t.shape} vs X {X_full.shape}")
        out = self.step(y_t, self.attn.project_kv(X_full))
        return out, out


def _stack_input(x_steps) -> Tensor:
    return x_steps if isinstance(x_steps, Tensor) else concat_time(x_steps)


class EncoderLayer(Module):
    def __init__(self, cfg: TranslatorConfig, rng, dtype=np.float32):
        self.cab = CAB(cfg, rng, dtype)
        self.gab = GAB(cfg, rng, dtype)
        self.ffn = FFN(cfg.D, rng, cfg.ffn_mult, dtype)

    def forward(self, x_steps, X_full: Tensor, h0: Tensor | None = None):
        """Returns ``(Y (B, T, D), hidden (B, T, D), h_last)``."""
        X = _stack_input(x_steps)
        B, T, D = X.shape
        c_all = self.cab.conv_steps(X)
        kv = self.gab.attn.project_kv(X_full)
        h = h0 if h0 is not None else Tensor(np.zeros((B, D), dtype=X.dtype))
        hidden = []
        for n in range(T):
            g = self.gab.step(self.cab.step(c_all[:, n, :], h), kv)
            h = g
            hidden.append(g)
        H = concat_time(hidden)
        return self.ffn(H), H, h


class DecoderLayer(Module):
    def __init__(self, cfg: TranslatorConfig, rng, dtype=np.float32):
        self.cab = CAB(cfg, rng, dtype)
        self.gab = GAB(cfg, rng, dtype)
        self.cross = MultiHeadAttention(AttentionConfig(cfg.D, cfg.num_heads), rng, dtype)
        self.cross_norm = LayerNorm(cfg.D, dtype)
        self.ffn = FFN(cfg.D, rng, cfg.ffn_mult, dtype)

    def forward(self, x_steps, X_full: Tensor, enc_steps, enc_h_last: Tensor):
        X = _stack_input(x_steps)
        E = _stack_input(enc_steps)
        B, T, D = X.shape
        if E.shape[1] != T:
            raise nx.ShapeError(f"decoder: {T} steps but {E.shape[1]} encoder steps")
        c_all = self.cab.conv_steps(X)
        kv = self.gab.attn.project_kv(X_full)
        ek, ev = self.cross.project_kv(E)
        h = enc_h_last
        hidden = []
        for n in range(T):
            g = self.gab.step(self.cab.step(c_all[:, n, :], h), kv)
            a = self.cross.attend(_as_seq(g), ek[:, n:n + 1, :], ev[:, n:n + 1, :]).reshape(B, D)
            e = self.cross_norm(g + a)
            h = e
            hidden.append(e)
        H = concat_time(hidden)
        return self.ffn(H), H, h


class Translator(Module):
    def __init__(self, cfg: TranslatorConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.encoders = [EncoderLayer(cfg, rng, dtype) for _ in range(cfg.M)]
        self.decoders = [DecoderLayer(cfg, rng, dtype) for _ in range(cfg.N)]

    def forward(self, X: Tensor):
        """Returns ``(Y (B, T, D), TranslatorState)``.

        Encoder layer k consumes layer k-1's output; the first decoder layer
        consumes the split input ``X``; every global block attends to ``X``.
        """
        state = TranslatorState()
        y = X
        h = None
        for layer in self.encoders:
            y, H, h = layer(y, X, h0=None)
            state.per_step_hidden.append(H)
        enc_y, enc_h = y, h
        y = X
        for layer in self.decoders:
            y, H, h = layer(y, X, enc_y, enc_h)
            state.per_step_hidden.append(H)
        state.last_hidden = h
        return y, state


def translator_forward(X: Tensor, translator: Translator):
    return translator(X)
