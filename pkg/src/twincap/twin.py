"""Twin alignment networks: momentum blending, copy-back, symmetric contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from twincap import numerics as nx
from twincap.numerics import ParameterSet, Tensor


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TwinPair:
    audio_params: ParameterSet
    text_params: ParameterSet
    beta: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        self.audio_params._check_compatible(self.text_params)


def momentum_update(pair: TwinPair) -> None:
    """``W <- beta * W + (1 - beta) * W_sim`` on the audio-side parameters."""
    pair.audio_params.blend_(pair.text_params, pair.beta)


def copy_back(pair: TwinPair) -> None:
    pair.text_params.copy_from_(pair.audio_params)


def sync(pair: TwinPair) -> None:
    momentum_update(pair)
    copy_back(pair)


def contrastive_loss(h_a: Tensor, h_c: Tensor, temperature: float = 0.07) -> Tensor:
    """Symmetric in-batch NLL over cosine similarities scaled by ``1/temperature``."""
    if h_a.shape != h_c.shape or h_a.ndim != 2:
        raise nx.ShapeError(f"contrastive_loss: {h_a.shape} vs {h_c.shape}")
    n = h_a.shape[0]
    if n < 2:
        raise ValueError("contrastive_loss needs at least two pairs")
    for h in (h_a, h_c):
        if np.any(np.linalg.norm(h.data, axis=1) == 0):
            raise ValueError("contrastive_loss: zero-norm embedding row")
    a = nx.l2_normalize(h_a)
    c = nx.l2_normalize(h_c)
    s = (a @ c.transpose()) * (1.0 / temperature)
    eye = np.eye(n)
    l_ac = -(nx.log_softmax(s, axis=1) * eye).sum() * (1.0 / n)
    l_ca = -(nx.log_softmax(s, axis=0) * eye).sum() * (1.0 / n)
    return (l_ac + l_ca) * 0.5


def total_loss(ce: Tensor, cl: Tensor | float) -> Tensor:
    for name, v in (("ce", ce), ("cl", cl)):
        val = v.data if isinstance(v, Tensor) else np.asarray(v)
        if not np.all(np.isfinite(val)):
            raise NonFiniteLoss(f"non-finite {name} loss: {float(val)}")
    return ce + cl

