"""Assembles fuser, twin translators and caption decoder for one ablation mode."""

from __future__ import annotations

import numpy as np

from twincap.captioner import CaptionDecoder
from twincap.config import TrainConfig
from twincap.fuser import Fuser, FuserConfig
from twincap.numerics import Tensor
from twincap.translator import Translator, TranslatorConfig
from twincap.twin import TwinPair


class CaptionModel:
    """Component networks selected by ``cfg.ablation_mode``.

    * baseline          view 0 -> decoder
    * fuser             3 views -> fuser -> decoder
    * fuser_translator  3 views -> fuser -> translator -> decoder
    * full_twin         as above, plus a text-branch translator tied by
                        contrastive loss and momentum sync
    """

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.fuser = None
        self.audio_translator = None
        self.text_translator = None
        if cfg.uses_fuser:
            fcfg = FuserConfig(
                D=cfg.D, T=cfg.T, num_fusion_layers=cfg.L, cfb_kernel=cfg.cfb_kernel,
                sfeb_bottleneck=cfg.sfeb_bottleneck or None, num_heads=cfg.num_heads,
            )
            self.fuser = Fuser(fcfg, rng, dtype)
        if cfg.uses_translator:
            tcfg = TranslatorConfig(
                D=cfg.D, T=cfg.T, M=cfg.M, N=cfg.N, cab_kernel=cfg.cab_kernel, num_heads=cfg.num_heads,
            )
            self.audio_translator = Translator(tcfg, rng, dtype)
            if cfg.twin:
                self.text_translator = Translator(tcfg, rng, dtype)
                # both branches start from the same weights
                self.text_translator.parameters().copy_from_(self.audio_translator.parameters())
        self.decoder = CaptionDecoder(
            cfg.vocab_size, cfg.D, cfg.T, cfg.T + 2, rng,
            num_layers=cfg.decoder_layers, num_heads=cfg.num_heads, dtype=dtype,
        )
        self.twin = (
            TwinPair(self.audio_translator.parameters(), self.text_translator.parameters(), cfg.beta)
            if cfg.twin else None
        )

    def components(self) -> dict:
        out = {
            "fuser": self.fuser,
            "audio_translator": self.audio_translator,
            "text_translator": self.text_translator,
            "decoder": self.decoder,
        }
        return {k: v for k, v in out.items() if v is not None}

    def train(self, mode=True):
        for m in self.components().values():
            m.train(mode)

    def eval(self):
        self.train(False)

    def audio_forward(self, views):
        """Returns ``(memory, translator_state or None)``."""
        views = [v if isinstance(v, Tensor) else Tensor(np.asarray(v)) for v in views]
        if self.fuser is None:
            return views[0], None
        x = self.fuser(views)
        if self.audio_translator is None:
            return x, None
        y, state = self.audio_translator(x)
        return y, state

    def text_forward(self, text_feat):
        x = text_feat if isinstance(text_feat, Tensor) else Tensor(np.asarray(text_feat))
        return self.text_translator(x)
