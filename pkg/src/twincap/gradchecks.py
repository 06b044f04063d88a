"""Finite-difference gradient checks for every block and composed network.

Every check runs in float64 on small random shapes and reduces the output to
a scalar with a fixed random readout ``sum(out * R)``, so all output
coordinates contribute to the gradient.  Inputs are checked alongside the
parameters.  Relative error is ``|a - n| / max(|a|, |n|, FLOOR)``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from twincap import numerics as nx
from twincap.blocks import FFN, AttentionConfig, BatchNorm1d, Conv1d, Conv2d, LayerNorm, Linear, MultiHeadAttention
from twincap.captioner import CaptionDecoder, DecoderBlock, ce_loss
from twincap.fuser import CFB, EFB, PFEB, SFEB, Fuser, FuserConfig, FusionLayer
from twincap.numerics import GradReport, ParameterSet, Tensor
from twincap.translator import CAB, GAB, Translator, TranslatorConfig
from twincap.twin import contrastive_loss

F64 = np.float64
# Biases feeding a normalisation and key-projection biases have an exact
# gradient of zero; below this magnitude coordinates are compared absolutely.
FLOOR = 1e-5
B, T, D, H = 3, 4, 8, 2


def _readout(out: Tensor, rng) -> Callable[[], Tensor]:
    R = Tensor(rng.standard_normal(out.shape))
    return lambda o: nx.sum_(o * R)


def _inputs(rng, *shapes) -> list:
    return [nx.parameter(rng.standard_normal(s), name=f"input{i}") for i, s in enumerate(shapes)]


def _check(name, module, inputs, forward, rng, tol) -> GradReport:
    """``forward(*inputs)`` -> Tensor; checks module params and inputs."""
    items = list(module.parameters()) if module is not None else []
    items += [(f"input{i}", x) for i, x in enumerate(inputs)]
    params = ParameterSet(items)
    out = forward(*inputs)
    read = _readout(out, rng)
    return nx.grad_check(lambda: read(forward(*inputs)), params, tol=tol, rng=rng, op_name=name, floor=FLOOR)


def _block_cases(rng):
    fcfg = FuserConfig(D=D, T=T, num_fusion_layers=2, num_heads=H, cfb_kernel=3)
    tcfg = TranslatorConfig(D=D, T=T, M=2, N=1, cab_kernel=3, num_heads=H)
    acfg = AttentionConfig(D, H)

    lin = Linear(D, 5, rng, F64)
    yield "linear", lin, _inputs(rng, (B, T, D)), lin
    ln = LayerNorm(D, F64)
    ln.gamma.data[...] = rng.uniform(0.5, 1.5, D)
    ln.beta.data[...] = rng.standard_normal(D) * 0.1
    yield "layer_norm", ln, _inputs(rng, (B, T, D)), ln
    bn = BatchNorm1d(D, F64)
    yield "batch_norm", bn, _inputs(rng, (B, D, T)), bn
    c1 = Conv1d(D, 6, 3, rng, F64)
    yield "conv1d", c1, _inputs(rng, (B, D, T)), c1
    c2 = Conv2d(3, 2, 3, rng, F64)
    yield "conv2d", c2, _inputs(rng, (B, 3, T, D)), c2
    mha = MultiHeadAttention(acfg, rng, F64)
    yield "attention", mha, _inputs(rng, (B, T, D), (B, 5, D)), mha
    yield "attention_causal", mha, _inputs(rng, (B, T, D)), lambda x: mha(x, x, causal=True)
    ffn = FFN(D, rng, 2, F64)
    yield "ffn", ffn, _inputs(rng, (B, T, D)), ffn

    efb = EFB(fcfg, rng, F64)
    yield "efb", efb, _inputs(rng, (B, T, D), (B, T, D), (B, T, D)), efb
    cfb = CFB(3, rng, F64)
    yield "cfb", cfb, _inputs(rng, (B, T, D), (B, T, D), (B, T, D)), lambda *s: cfb(list(s))
    pfeb = PFEB(fcfg, rng, F64)
    yield "pfeb", pfeb, _inputs(rng, (B, T, D)), pfeb
    sfeb = SFEB(fcfg, rng, F64)
    yield "sfeb", sfeb, _inputs(rng, (B, T, D)), sfeb
    layer = FusionLayer(fcfg, rng, F64)
    yield "fusion_layer", layer, _inputs(rng, (B, T, D), (B, T, D), (B, T, D)), lambda *s: layer(list(s))[-1]

    cab = CAB(tcfg, rng, F64)
    yield "cab", cab, _inputs(rng, (B, D), (B, D)), cab
    gab = GAB(tcfg, rng, F64)
    yield "gab", gab, _inputs(rng, (B, D), (B, T, D)), lambda y, X: gab(y, X)[0]

    blk = DecoderBlock(D, H, 2, rng, F64)
    yield "decoder_block", blk, _inputs(rng, (B, 5, D), (B, T, D)), \
        lambda x, m: blk(x, blk.cross_attn.project_kv(m))


def _network_cases(rng):
    fcfg = FuserConfig(D=D, T=T, num_fusion_layers=2, num_heads=H, cfb_kernel=3)
    fuser = Fuser(fcfg, rng, F64)
    yield "fuser_L2", fuser, _inputs(rng, (B, T, D), (B, T, D), (B, T, D)), lambda *v: fuser(list(v))

    tcfg = TranslatorConfig(D=D, T=T, M=2, N=1, cab_kernel=3, num_heads=H)
    tr = Translator(tcfg, rng, F64)
    yield "translator_M2_N1", tr, _inputs(rng, (B, T, D)), lambda x: tr(x)[0]
    yield "translator_last_hidden", tr, _inputs(rng, (B, T, D)), lambda x: tr(x)[1].last_hidden

    dec = CaptionDecoder(11, D, T, 6, rng, num_layers=2, num_heads=H, dtype=F64)
    ids = rng.integers(0, 11, (B, 5))
    yield "caption_decoder", dec, _inputs(rng, (B, T, D)), lambda m: dec(m, ids)


def _loss_cases(rng):
    """Scalar losses checked directly, without a readout."""
    N = 5
    ha, hc = _inputs(rng, (N, D), (N, D))
    yield "contrastive_loss", ParameterSet([("h_audio", ha), ("h_text", hc)]), \
        lambda: contrastive_loss(ha, hc, 0.5)

    logits = nx.parameter(rng.standard_normal((B, 5, 11)), name="logits")
    targets = rng.integers(0, 11, (B, 5))
    mask = np.ones((B, 5), dtype=bool)
    mask[0, 3:] = False
    for eps in (0.0, 0.1):
        yield f"ce_loss_smoothing{eps}", ParameterSet([("logits", logits)]), \
            lambda eps=eps: ce_loss(logits, targets, mask, smoothing=eps)


GROUPS = ("blocks", "networks", "losses")


def run_gradchecks(group: str | None = None, seed: int = 0, tol: float = 1e-4) -> list[GradReport]:
    """Run the suite (or one group of it) and return one report per case."""
    if group is not None and group not in GROUPS:
        raise ValueError(f"unknown group {group!r}; expected one of {GROUPS}")
    rng = np.random.default_rng(seed)
    reports = []
    if group in (None, "blocks"):
        for name, mod, inputs, fwd in _block_cases(rng):
            reports.append(_check(name, mod, inputs, fwd, rng, tol))
    if group in (None, "networks"):
        for name, mod, inputs, fwd in _network_cases(rng):
            reports.append(_check(name, mod, inputs, fwd, rng, tol))
    if group in (None, "losses"):
        for name, params, f in _loss_cases(rng):
            reports.append(nx.grad_check(f, params, tol=tol, rng=rng, op_name=name, floor=FLOOR))
    return reports
