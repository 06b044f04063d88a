"""Neural building blocks shared by the fusion, alignment and caption networks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from twincap import numerics as nx
from twincap.numerics import ParameterSet, Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return nx.parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))


def zeros_param(shape, dtype) -> Tensor:
    return nx.parameter(np.zeros(shape, dtype=dtype))


def ones_param(shape, dtype) -> Tensor:
    return nx.parameter(np.ones(shape, dtype=dtype))


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; child modules
    may be attributes or lists of modules.  Attribute insertion order fixes
    the parameter order.  A module referenced from several places (weight
    sharing) contributes its parameters once, under the first name reached.
    """

    training = True
    _buffer_names: tuple = ()

    def _walk(self, prefix, seen_mods, seen_params, out_params, out_buffers):
        if id(self) in seen_mods:
            return
        seen_mods.add(id(self))
        for b in self._buffer_names:
            out_buffers.append((prefix + b, self, b))
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                if id(val) not in seen_params:
                    seen_params.add(id(val))
                    out_params.append((prefix + key, val))
            elif isinstance(val, Module):
                val._walk(f"{prefix}{key}.", seen_mods, seen_params, out_params, out_buffers)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        item._walk(f"{prefix}{key}.{i}.", seen_mods, seen_params, out_params, out_buffers)

    def _collect(self):
        params, buffers = [], []
        self._walk("", set(), set(), params, buffers)
        return params, buffers

    def parameters(self) -> ParameterSet:
        return ParameterSet(self._collect()[0])

    def buffers(self) -> dict:
        return {name: getattr(mod, attr) for name, mod, attr in self._collect()[1]}

    def load_buffers(self, state: dict):
        for name, mod, attr in self._collect()[1]:
            getattr(mod, attr)[...] = state[name]

    def modules(self):
        out, seen = [], set()

        def rec(m):
            if id(m) in seen:
                return
            seen.add(id(m))
            out.append(m)
            for val in vars(m).values():
                if isinstance(val, Module):
                    rec(val)
                elif isinstance(val, (list, tuple)):
                    for item in val:
                        if isinstance(item, Module):
                            rec(item)

        rec(self)
        return out

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        """Cast parameters and buffers in place (used for 64-bit grad checks)."""
        for m in self.modules():
            for key, val in vars(m).items():
                if isinstance(val, Tensor):
                    val.data = val.data.astype(dtype)
            for b in m._buffer_names:
                setattr(m, b, getattr(m, b).astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float32, bias=True):
        self.weight = uniform_init(rng, (d_in, d_out), d_in, dtype)
        self.bias = zeros_param((d_out,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return nx.linear(x, self.weight, self.bias)

    def zero_(self):
        self.weight.data[...] = 0
        if self.bias is not None:
            self.bias.data[...] = 0


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int = 4

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


class MultiHeadAttention(Module):
    """Projected scaled dot-product attention; self-attention when query is key_value."""

    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float32):
        self.num_heads = cfg.num_heads
        self.model_dim = cfg.model_dim
        d = cfg.model_dim
        self.q_proj = Linear(d, d, rng, dtype)
        self.k_proj = Linear(d, d, rng, dtype)
        self.v_proj = Linear(d, d, rng, dtype)
        self.out_proj = Linear(d, d, rng, dtype)

    def project_kv(self, key_value: Tensor):
        return self.k_proj(key_value), self.v_proj(key_value)

    def attend(self, query: Tensor, k: Tensor, v: Tensor, causal=False) -> Tensor:
        q = self.q_proj(query)
        return self.out_proj(nx.attention(q, k, v, self.num_heads, causal))

    def forward(self, query: Tensor, key_value: Tensor, causal=False) -> Tensor:
        if query.ndim != 3 or key_value.ndim != 3:
            raise nx.ShapeError("attention expects (B, T, D) inputs")
        if query.shape[0] != key_value.shape[0] or query.shape[2] != key_value.shape[2]:
            raise nx.ShapeError(f"attention: query {query.shape} vs key_value {key_value.shape}")
        if query.shape[2] != self.model_dim:
            raise nx.ShapeError(f"attention: model_dim {self.model_dim}, got {query.shape[2]}")
        k, v = self.project_kv(key_value)
        return self.attend(query, k, v, causal)


def multi_head_attention(query: Tensor, key_value: Tensor, mha: MultiHeadAttention) -> Tensor:
    return mha(query, key_value)


class Conv1d(Module):
    """Same-padded conv over the last axis of ``(B, C_in, L)``."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, rng, dtype=np.float32):
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        self.weight = uniform_init(rng, (c_out, c_in, kernel_size), c_in * kernel_size, dtype)
        self.bias = zeros_param((c_out,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return nx.conv1d(x, self.weight, self.bias)

    def set_delta_(self):
        """Centered delta kernel mapping channel i to channel i, zero bias."""
        self.weight.data[...] = 0
        k = self.weight.shape[2]
        for c in range(min(self.weight.shape[0], self.weight.shape[1])):
            self.weight.data[c, c, k // 2] = 1
        self.bias.data[...] = 0


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int, rng, dtype=np.float32):
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        shape = (c_out, c_in, kernel_size, kernel_size)
        self.weight = uniform_init(rng, shape, c_in * kernel_size * kernel_size, dtype)
        self.bias = zeros_param((c_out,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return nx.conv2d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps=1e-5):
        if dim < 2:
            raise ValueError("layer_norm needs at least 2 features")
        self.gamma = ones_param((dim,), dtype)
        self.beta = zeros_param((dim,), dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm1d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, dtype=np.float32, momentum=0.1, eps=1e-5):
        self.gamma = ones_param((channels,), dtype)
        self.beta = zeros_param((channels,), dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return nx.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class FFN(Module):
    """linear(D -> mult*D), GELU, linear(-> D)."""

    def __init__(self, dim: int, rng, hidden_mult: int = 4, dtype=np.float32):
        if hidden_mult < 1:
            raise ValueError("hidden_mult must be >= 1")
        self.fc1 = Linear(dim, hidden_mult * dim, rng, dtype)
        self.fc2 = Linear(hidden_mult * dim, dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(nx.gelu(self.fc1(x)))
