"""CTC loss and per-frame token prediction.

The loss is the standard blank-augmented forward-backward over a frame-by
-state lattice, computed in float64 log domain with an analytic gradient
with respect to the per-frame log-posteriors.  Prediction is either row
argmax or top-N sampling; both feed the frame-merge stage downstream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Vocab:
    """Regular-token count; the blank id is the extra last index."""

    size: int

    @property
    def blank_id(self) -> int:
        return self.size

    @property
    def num_classes(self) -> int:
        return self.size + 1

    def check_labels(self, labels) -> None:
        for tok in labels:
            if not 0 <= tok < self.size:
                raise ValueError(f"label {tok} outside vocab of size {self.size}")


@dataclass
class CtcPosteriorSeq:
    """Per-frame log-softmax rows of shape (L, vocab.size + 1)."""

    log_probs: T.Tensor
    vocab: Vocab

    def __post_init__(self):
        lp = self.log_probs.data
        if lp.ndim != 2 or lp.shape[1] != self.vocab.num_classes:
            raise ValueError(f"posterior shape {lp.shape} does not match vocab "
                             f"({self.vocab.num_classes} classes)")
        sums = np.exp(lp).sum(axis=1)
        if not np.all(np.abs(sums - 1.0) < 1e-6):
            raise ValueError("posterior rows must each sum to 1")

    def __len__(self) -> int:
        return self.log_probs.data.shape[0]


@dataclass
class PredictionSeq:
    """Predicted token per frame; blank allowed."""

    tokens: list[int]
    blank_id: int

    def __len__(self) -> int:
        return len(self.tokens)


def min_alignment_frames(labels) -> int:
    """Shortest CTC path for the labels: one frame per token plus a blank
    between each adjacent repeat."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def ctc_feasible(labels, num_frames: int) -> bool:
    return num_frames >= min_alignment_frames(labels)


def _blank_augment(labels, blank_id: int) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, blank_id, dtype=np.int64)
    ext[1::2] = labels
    return ext


def ctc_loss(posteriors: CtcPosteriorSeq, labels) -> T.Tensor:
    """-log P(labels | posteriors) summed over all alignments.

    Infeasible labels (too few frames) return +inf with zero gradient so a
    training loop can skip the example instead of crashing.
    """
    vocab = posteriors.vocab
    vocab.check_labels(labels)
    lp_t = posteriors.log_probs
    lpx = lp_t.data
    L = lpx.shape[0]
    if L < 1:
        raise ValueError("ctc_loss needs at least one frame")
    if not ctc_feasible(labels, L):
        log.warning("infeasible CTC labels (need %d frames, have %d)",
                    min_alignment_frames(labels), L)
        return T.Tensor(np.inf)

    ext = _blank_augment(labels, vocab.blank_id)
    S = len(ext)
    emit = lpx[:, ext]                                   # (L, S)
    # transitions into s: stay, from s-1, and skip from s-2 when legal
    skip_ok = np.zeros(S, dtype=bool)
    if S > 2:
        skip_ok[2:] = (ext[2:] != vocab.blank_id) & (ext[2:] != ext[:-2])

    neg = -np.inf
    alpha = np.full((L, S), neg)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, L):
        prev = alpha[t - 1]
        step = np.full(S, neg)
        step[1:] = prev[:-1]
        skip = np.full(S, neg)
        if S > 2:
            skip[2:] = prev[:-2]
        skip = np.where(skip_ok, skip, neg)
        alpha[t] = T.logsumexp_np(np.stack([prev, step, skip]), axis=0) + emit[t]

    tail = alpha[L - 1, S - 2] if S > 1 else neg
    loglike = np.logaddexp(alpha[L - 1, S - 1], tail)

    beta = np.full((L, S), neg)
    beta[L - 1, S - 1] = 0.0
    if S > 1:
        beta[L - 1, S - 2] = 0.0
    for t in range(L - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        step = np.full(S, neg)
        step[:-1] = nxt[1:]
        skip = np.full(S, neg)
        if S > 2:
            skip[:-2] = np.where(skip_ok[2:], nxt[2:], neg)
        beta[t] = T.logsumexp_np(np.stack([nxt, step, skip]), axis=0)

    # state occupancy -> gradient wrt log-probs
    post = np.exp(alpha + beta - loglike) if np.isfinite(loglike) else np.zeros((L, S))
    grad_lp = np.zeros_like(lpx)
    for s in range(S):
        grad_lp[:, ext[s]] -= post[:, s]

    def bw(out: T.Tensor):
        lp_t._accumulate(out.grad * grad_lp)

    return T.from_op(np.float64(-loglike), (lp_t,), bw)


def ctc_predict_argmax(posteriors: CtcPosteriorSeq) -> PredictionSeq:
    """Rowwise argmax; ties resolve to the lowest index."""
    tokens = np.argmax(posteriors.log_probs.data, axis=1)
    return PredictionSeq(tokens.tolist(), posteriors.vocab.blank_id)


def ctc_predict_sampled(posteriors: CtcPosteriorSeq, top_n: int, rng: Rng) -> PredictionSeq:
    """Sample each frame's token among its top-N probabilities.

    Candidates are renormalized within the top-N set; frames draw
    independently.  top_n=1 reproduces the argmax exactly.
    """
    vocab = posteriors.vocab
    if not 1 <= top_n <= vocab.num_classes:
        raise ValueError(f"top_n must be in [1, {vocab.num_classes}]")
    probs = np.exp(posteriors.log_probs.data)
    tokens = []
    for row in probs:
        order = np.argsort(-row, kind="stable")[:top_n]
        r = rng.choice(row[order])
        tokens.append(int(order[r]))
    return PredictionSeq(tokens, vocab.blank_id)


def collapse(preds: PredictionSeq) -> list[int]:
    """Merge adjacent duplicates, then delete blanks."""
    out: list[int] = []
    prev: int | None = None
    for tok in preds.tokens:
        if tok != prev:
            out.append(tok)
        prev = tok
    return [t for t in out if t != preds.blank_id]
