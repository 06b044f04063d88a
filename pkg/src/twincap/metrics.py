"""Caption metrics (BLEU-n, ROUGE-L) and cross-modal retrieval recall."""

from __future__ import annotations

import math
from collections import Counter

import numpy as np


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(candidate, references, n):
    """Clipped n-gram matches and total candidate n-grams."""
    cand = _ngrams(candidate, n)
    max_ref = Counter()
    for ref in references:
        for g, c in _ngrams(ref, n).items():
            max_ref[g] = max(max_ref[g], c)
    clipped = sum(min(c, max_ref[g]) for g, c in cand.items())
    return clipped, sum(cand.values())


def brevity_penalty(cand_len, references):
    # closest reference length, shorter one on ties
    r = min((abs(len(ref) - cand_len), len(ref)) for ref in references)[1]
    if cand_len >= r:
        return 1.0
    return math.exp(1.0 - r / cand_len)


def bleu_n(candidate, references, n=4) -> float:
    """Sentence BLEU with uniform weights over orders ``1..n``.

    Orders >= 2 with zero clipped matches use add-one smoothing,
    ``1 / (total + 1)``; a zero unigram precision gives BLEU 0.
    """
    if not 1 <= n <= 4:
        raise ValueError("n must lie in [1, 4]")
    candidate = list(candidate)
    if not candidate:
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        match, total = modified_precision(candidate, references, k)
        if match == 0:
            if k == 1:
                return 0.0
            p = 1.0 / (total + 1)
        else:
            p = match / total
        log_p += math.log(p) / n
    return brevity_penalty(len(candidate), references) * math.exp(log_p)


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = 1.2) -> float:
    """LCS F-measure ``(1 + b^2) R P / (R + b^2 P)``."""
    reference = list(reference)
    if not reference:
        raise ValueError("reference must be non-empty")
    candidate = list(candidate)
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1 + beta ** 2) * r * p / (r + beta ** 2 * p)


def corpus_scores(candidates, references) -> dict:
    """Mean sentence BLEU-1..4 and ROUGE-L over aligned candidate/reference lists."""
    if not candidates:
        raise ValueError("empty split")
    out = {}
    for n in range(1, 5):
        out[f"bleu{n}"] = float(np.mean([bleu_n(c, [r], n) for c, r in zip(candidates, references)]))
    out["rouge_l"] = float(np.mean([rouge_l(c, r) for c, r in zip(candidates, references)]))
    return out


def recall_at_k(query: np.ndarray, gallery: np.ndarray, k: int) -> float:
    """Fraction of rows i whose pair gallery[i] ranks in the top k by cosine similarity.

    Rank counts every other gallery item with similarity >= the true pair's,
    so ties count against the query.
    """
    q = query / np.linalg.norm(query, axis=1, keepdims=True)
    g = gallery / np.linalg.norm(gallery, axis=1, keepdims=True)
    sim = q @ g.T
    diag = np.diag(sim)
    ge = (sim >= diag[:, None]).sum(axis=1) - 1
    return float(np.mean(ge < k))
