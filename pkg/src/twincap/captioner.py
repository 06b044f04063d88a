"""Autoregressive caption decoder, label-smoothed cross-entropy and beam search."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from twincap import numerics as nx
from twincap.blocks import FFN, AttentionConfig, LayerNorm, Linear, Module, MultiHeadAttention
from twincap.numerics import Tensor

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"


@dataclass
class Vocab:
    tokens: list
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2

    def __post_init__(self):
        ids = {self.pad_id, self.bos_id, self.eos_id}
        if len(ids) != 3:
            raise ValueError("pad, bos and eos ids must be distinct")
        if max(ids) >= len(self.tokens):
            raise ValueError("special id outside the vocabulary")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @classmethod
    def synthetic(cls, size: int = 64) -> "Vocab":
        return cls([PAD, BOS, EOS] + [f"s{i}" for i in range(size - 3)])

    def symbol_id(self, symbol: int) -> int:
        return 3 + symbol

    def decode(self, ids) -> list:
        special = {self.pad_id, self.bos_id, self.eos_id}
        return [self.tokens[i] for i in ids if i not in special]

    def save(self, path):
        lines = [f"pad_id={self.pad_id}", f"bos_id={self.bos_id}", f"eos_id={self.eos_id}"]
        Path(path).write_text("\n".join(lines + list(self.tokens)) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        header = {}
        for line in lines[:3]:
            key, _, val = line.partition("=")
            header[key.strip()] = int(val)
        return cls(lines[3:], header["pad_id"], header["bos_id"], header["eos_id"])


@dataclass
class CaptionBatch:
    token_ids: np.ndarray  # (B, S) int
    pad_mask: np.ndarray  # (B, S) bool, True on real tokens

    @classmethod
    def from_sequences(cls, seqs, pad_id: int = 0) -> "CaptionBatch":
        S = max(len(s) for s in seqs)
        ids = np.full((len(seqs), S), pad_id, dtype=np.int64)
        mask = np.zeros((len(seqs), S), dtype=bool)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
            mask[i, : len(s)] = True
        return cls(ids, mask)

    def validate(self, vocab: Vocab):
        for row, m in zip(self.token_ids, self.pad_mask):
            real = row[m]
            if len(real) == 0 or real[0] != vocab.bos_id:
                raise ValueError("caption must start with BOS")
            if int((real == vocab.eos_id).sum()) != 1 or real[-1] != vocab.eos_id:
                raise ValueError("caption must contain exactly one EOS, last before padding")

    def decoder_io(self):
        """Teacher-forcing split: inputs drop the last position, targets drop BOS."""
        return self.token_ids[:, :-1], self.token_ids[:, 1:], self.pad_mask[:, 1:]


class DecoderBlock(Module):
    def __init__(self, D, num_heads, ffn_mult, rng, dtype):
        cfg = AttentionConfig(D, num_heads)
        self.self_attn = MultiHeadAttention(cfg, rng, dtype)
        self.norm1 = LayerNorm(D, dtype)
        self.cross_attn = MultiHeadAttention(cfg, rng, dtype)
        self.norm2 = LayerNorm(D, dtype)
        self.ffn = FFN(D, rng, ffn_mult, dtype)
        self.norm3 = LayerNorm(D, dtype)

    def forward(self, x: Tensor, mem_kv) -> Tensor:
        x = self.norm1(x + self.self_attn(x, x, causal=True))
        x = self.norm2(x + self.cross_attn.attend(x, *mem_kv))
        return self.norm3(x + self.ffn(x))


class CaptionDecoder(Module):
    """Post-norm transformer decoder over target tokens with cross-attention to memory.

    Learned positional tables are added both to the token embeddings and to
    the memory, so the decoder can align output positions with memory steps
    even when the memory itself carries no order information.
    """

    def __init__(
        self,
        vocab_size: int,
        D: int,
        mem_len: int,
        max_len: int,
        rng,
        num_layers: int = 2,
        num_heads: int = 4,
        ffn_mult: int = 4,
        dtype=np.float32,
    ):
        self.vocab_size = vocab_size
        self.tok_emb = nx.parameter(rng.normal(0.0, 1.0, (vocab_size, D)).astype(dtype))
        self.pos_emb = nx.parameter(rng.normal(0.0, 1.0, (max_len, D)).astype(dtype))
        self.mem_pos = nx.parameter(rng.normal(0.0, 1.0, (mem_len, D)).astype(dtype))
        self.blocks = [DecoderBlock(D, num_heads, ffn_mult, rng, dtype) for _ in range(num_layers)]
        self.head = Linear(D, vocab_size, rng, dtype)

    def encode_memory(self, memory: Tensor):
        T = memory.shape[1]
        mem = memory + self.mem_pos[:T]
        return [blk.cross_attn.project_kv(mem) for blk in self.blocks]

    def decode(self, mem_kv, ids) -> Tensor:
        ids = np.asarray(ids)
        if ids.max() >= self.vocab_size or ids.min() < 0:
            raise ValueError("token id outside the vocabulary")
        S = ids.shape[1]
        x = nx.embedding(ids, self.tok_emb) + self.pos_emb[:S]
        for blk, kv in zip(self.blocks, mem_kv):
            x = blk(x, kv)
        return self.head(x)

    def forward(self, memory: Tensor, ids) -> Tensor:
        """``memory (B, T, D)``, input ids ``(B, S)`` -> logits ``(B, S, V)``.

        Position ``s`` predicts token ``s + 1``; causal masking keeps it blind
        to inputs after ``s``.
        """
        return self.decode(self.encode_memory(memory), ids)


def decoder_forward(memory: Tensor, tokens: CaptionBatch, decoder: CaptionDecoder) -> Tensor:
    return decoder(memory, tokens.token_ids)


def ce_loss(logits: Tensor, targets, mask=None, smoothing: float = 0.1) -> Tensor:
    """Mean label-smoothed NLL over non-PAD positions.

    ``targets`` is a ``CaptionBatch`` (ids and mask taken from it) or an id
    array aligned position-for-position with ``logits``.
    """
    if not 0.0 <= smoothing <= 0.3:
        raise ValueError("smoothing must lie in [0, 0.3]")
    if isinstance(targets, CaptionBatch):
        targets, mask = targets.token_ids, targets.pad_mask
    targets = np.asarray(targets)
    if targets.max() >= logits.shape[-1]:
        raise ValueError("target id outside the vocabulary")
    return nx.cross_entropy(logits, targets, mask, smoothing)


def teacher_forced_loss(decoder: CaptionDecoder, memory: Tensor, batch: CaptionBatch, smoothing=0.1):
    inputs, targets, mask = batch.decoder_io()
    return ce_loss(decoder(memory, inputs), targets, mask, smoothing)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

StepFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _log_softmax_np(x):
    m = x.max(axis=-1, keepdims=True)
    return x - (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))


def model_step_fn(decoder: CaptionDecoder, memory: Tensor) -> StepFn:
    """Next-token log-probs for prefixes ``(R, s)`` owned by samples ``owners (R,)``."""
    with nx.no_grad():
        mem_kv = [(k.data, v.data) for k, v in decoder.encode_memory(memory)]

    def step(prefixes, owners):
        with nx.no_grad():
            kv = [(Tensor(k[owners]), Tensor(v[owners])) for k, v in mem_kv]
            logits = decoder.decode(kv, prefixes).data[:, -1, :]
        return _log_softmax_np(logits.astype(np.float64))

    return step


def beam_search_steps(
    step_fn: StepFn,
    num_samples: int,
    num_beams: int,
    max_len: int,
    bos_id: int,
    eos_id: int,
):
    """Lock-step beam search for several samples.

    Each step keeps the top ``num_beams`` expansions per sample (ties: lower
    token id, then lower beam index).  Expansions ending in EOS are moved to
    the finished list.  A sample stops once no beams are live or its best
    finished score is at least its best live score (scores only fall as
    sequences grow, since there is no length penalty).

    Returns ``[(tokens, logprob), ...]`` with tokens excluding BOS and
    including EOS when one was emitted.
    """
    if num_beams < 1:
        raise ValueError("num_beams must be >= 1")
    live = [[(0.0, [bos_id])] for _ in range(num_samples)]
    finished = [[] for _ in range(num_samples)]
    active = list(range(num_samples))
    for _ in range(max_len):
        if not active:
            break
        rows = [seq for i in active for _, seq in live[i]]
        owners = np.array([i for i in active for _ in live[i]], dtype=np.int64)
        logp = step_fn(np.array(rows, dtype=np.int64), owners)
        V = logp.shape[1]
        r = 0
        still = []
        for i in active:
            beams = live[i]
            k = len(beams)
            block = logp[r:r + k]
            r += k
            scores = (np.array([s for s, _ in beams])[:, None] + block).ravel()
            beam_idx, tok = np.divmod(np.arange(k * V), V)
            order = np.lexsort((beam_idx, tok, -scores))[:num_beams]
            new_live = []
            for j in order:
                seq = beams[beam_idx[j]][1] + [int(tok[j])]
                if tok[j] == eos_id:
                    finished[i].append((float(scores[j]), seq))
                else:
                    new_live.append((float(scores[j]), seq))
            live[i] = new_live
            best_fin = max((s for s, _ in finished[i]), default=-np.inf)
            if new_live and best_fin < new_live[0][0]:
                still.append(i)
        active = still
    results = []
    for i in range(num_samples):
        pool = finished[i] if finished[i] else live[i]
        score, seq = max(pool, key=lambda x: x[0])  # first maximum wins ties
        results.append((seq[1:], score))
    return results


def beam_search(
    decoder: CaptionDecoder,
    memory: Tensor,
    num_beams: int = 4,
    max_len: int = 16,
    bos_id: int = 1,
    eos_id: int = 2,
):
    """Decode every sample of ``memory (N, T, D)``; returns one token list for N == 1."""
    res = beam_search_steps(
        model_step_fn(decoder, memory), memory.shape[0], num_beams, max_len, bos_id, eos_id
    )
    tokens = [seq for seq, _ in res]
    return tokens[0] if memory.shape[0] == 1 else tokens


def greedy_decode(step_fn: StepFn, max_len: int, bos_id: int, eos_id: int, owner: int = 0):
    seq, score = [bos_id], 0.0
    for _ in range(max_len):
        lp = step_fn(np.array([seq], dtype=np.int64), np.array([owner]))[0]
        t = int(np.argmax(lp))
        score += float(lp[t])
        seq.append(t)
        if t == eos_id:
            break
    return seq[1:], score


def sequence_logprob(step_fn: StepFn, tokens, bos_id: int, owner: int = 0) -> float:
    seq, score = [bos_id], 0.0
    for t in tokens:
        lp = step_fn(np.array([seq], dtype=np.int64), np.array([owner]))[0]
        score += float(lp[t])
        seq.append(t)
    return score
