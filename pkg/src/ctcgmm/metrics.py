"""Corpus evaluation: BLEU-4, token accuracy, entity recall."""

from __future__ import annotations

import math
from collections import Counter

MAX_ORDER = 4
_SMOOTH_EPS = 0.01


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references, smooth: bool = False) -> float:
    """Corpus-level BLEU-4 in [0, 100]: uniform weights, clipped counts,
    brevity penalty on total lengths.  Disabled smoothing returns 0.0 when
    any order has no overlap; the epsilon flag rescues short outputs."""
    if not hypotheses:
        raise ValueError("empty hypothesis set")
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis/reference counts differ")
    clipped = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        if not ref:
            raise ValueError("empty reference")
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            totals[n - 1] += max(len(hyp) - n + 1, 0)
            for gram, count in hyp_counts.items():
                clipped[n - 1] += min(count, ref_counts.get(gram, 0))
    if hyp_len == 0:
        return 0.0
    log_precision = 0.0
    for n in range(MAX_ORDER):
        num, den = clipped[n], totals[n]
        if den == 0:
            return 0.0
        if num == 0:
            if not smooth:
                return 0.0
            num = _SMOOTH_EPS
        log_precision += math.log(num / den) / MAX_ORDER
    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(log_precision)


def token_accuracy(hypotheses, references) -> float:
    """Positionwise matches over the longer of each pair."""
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis/reference counts differ")
    matched = 0
    total = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        matched += sum(1 for a, b in zip(hyp, ref) if a == b)
        total += max(len(hyp), len(ref))
    return matched / total if total else 0.0


def _contains_contiguous(haystack: list, needle: list) -> bool:
    n = len(needle)
    return any(haystack[i:i + n] == needle for i in range(len(haystack) - n + 1))


def entity_recall(hypotheses, references, entity_targets) -> float | None:
    """Fraction of required entity sequences found contiguously in the
    matching hypothesis; None when nothing is required."""
    if not (len(hypotheses) == len(references) == len(entity_targets)):
        raise ValueError("aligned hypothesis/reference/entity lists required")
    required = 0
    found = 0
    for hyp, targets in zip(hypotheses, entity_targets):
        hyp = list(hyp)
        for seq in targets:
            required += 1
            if _contains_contiguous(hyp, list(seq)):
                found += 1
    if required == 0:
        return None
    return found / required
