"""Frame merging guided by per-frame token predictions.

Consecutive frames with the same predicted token collapse into one output
frame.  Average keeps every run (blank runs included); Attention pools each
non-blank run together with its immediately preceding blank run under a
position-queried single-head attention; Discrete replaces runs by token
embeddings, optionally dropping blanks.  The matching text-side processing
interleaves blanks only for the modes whose outputs contain blank frames.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .ctc import PredictionSeq

log = logging.getLogger(__name__)


class MergeMode(Enum):
    NONE = "none"                                  # bypass: keep every frame
    AVERAGE = "average"
    ATTENTION = "attention"
    DISCRETE_KEEP_BLANK = "discrete_keep_blank"
    DISCRETE_REMOVE_BLANK = "discrete_remove_blank"

    @property
    def text_uses_blank(self) -> bool:
        return self in (MergeMode.AVERAGE, MergeMode.DISCRETE_KEEP_BLANK)

    @property
    def is_discrete(self) -> bool:
        return self in (MergeMode.DISCRETE_KEEP_BLANK, MergeMode.DISCRETE_REMOVE_BLANK)


@dataclass(frozen=True)
class Run:
    """Maximal constant-token segment [start, end], inclusive."""

    start: int
    end: int
    token: int

    def __len__(self) -> int:
        return self.end - self.start + 1


@dataclass
class CompressedSeq:
    """Merged frames with their tokens and inclusive source spans."""

    frames: T.Tensor            # (M, D)
    tokens: list[int]
    spans: list[tuple[int, int]]
    source_frames: int          # L before merging

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class AttentionMergeParams:
    key_proj: T.Tensor          # (D, D)
    value_proj: T.Tensor        # (D, D)
    dim: int


def sinusoidal_embedding(positions, dim: int) -> np.ndarray:
    """Interleaved sin/cos position codes with base 10000; (n, dim)."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = np.arange((dim + 1) // 2, dtype=np.float64)
    freq = np.power(10000.0, -2.0 * half / dim)
    angles = pos * freq
    out = np.zeros((pos.shape[0], dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles[:, : dim // 2])
    return out


def segment_runs(preds: PredictionSeq) -> list[Run]:
    """Maximal constant-token segments, in frame order."""
    if len(preds) == 0:
        raise ValueError("cannot segment an empty prediction sequence")
    runs: list[Run] = []
    start = 0
    for i in range(1, len(preds) + 1):
        if i == len(preds) or preds.tokens[i] != preds.tokens[start]:
            runs.append(Run(start, i - 1, preds.tokens[start]))
            start = i
    return runs


def merge_average(h: T.Tensor, runs: list[Run]) -> CompressedSeq:
    """One frame per run: the arithmetic mean of the run's input frames."""
    L = h.data.shape[0]
    weights = np.zeros((len(runs), L))
    for m, run in enumerate(runs):
        weights[m, run.start:run.end + 1] = 1.0 / len(run)
    frames = T.matmul(T.Tensor(weights), h)
    return CompressedSeq(frames, [r.token for r in runs],
                         [(r.start, r.end) for r in runs], L)


def merge_attention(h: T.Tensor, runs: list[Run], params: AttentionMergeParams,
                    blank_id: int) -> CompressedSeq:
    """Single-query attention per non-blank run, absorbing the blank run
    (if any) immediately before it; trailing blank runs are dropped."""
    L, D = h.data.shape
    blank = blank_id
    keys = T.matmul(h, params.key_proj)
    values = T.matmul(h, params.value_proj)
    scale = 1.0 / math.sqrt(params.dim)

    outputs: list[T.Tensor] = []
    tokens: list[int] = []
    spans: list[tuple[int, int]] = []
    pending_blank_start: int | None = None
    u = 0
    for run in runs:
        if run.token == blank:
            pending_blank_start = run.start
            continue
        u += 1                                     # merged positions are 1-based
        win_start = pending_blank_start if pending_blank_start is not None else run.start
        pending_blank_start = None
        width = run.end - win_start + 1
        query = sinusoidal_embedding([u], params.dim).reshape(params.dim, 1)
        k_win = T.narrow(keys, 0, win_start, width)
        v_win = T.narrow(values, 0, win_start, width)
        scores = T.reshape(T.mul(T.matmul(k_win, T.Tensor(query)), scale), (1, width))
        att = T.softmax(scores, axis=-1)
        outputs.append(T.matmul(att, v_win))
        tokens.append(run.token)
        spans.append((win_start, run.end))
    if pending_blank_start is not None:
        log.debug("dropping trailing blank run starting at %d", pending_blank_start)
    if not outputs:
        return CompressedSeq(T.Tensor(np.zeros((0, D))), [], [], L)
    return CompressedSeq(T.concat(outputs, axis=0), tokens, spans, L)


def merge_discrete(runs: list[Run], embedding: T.Tensor, keep_blank: bool,
                   num_frames: int) -> CompressedSeq:
    """Embedding lookup of run tokens; blank runs kept or dropped."""
    if keep_blank:
        kept = runs
    else:
        blank = embedding.data.shape[0] - 1
        kept = [r for r in runs if r.token != blank]
        if not kept:
            log.warning("all-blank prediction: empty discrete sequence")
    for r in kept:
        if not 0 <= r.token < embedding.data.shape[0]:
            raise ValueError(f"token {r.token} outside embedding table")
    if not kept:
        return CompressedSeq(T.Tensor(np.zeros((0, embedding.data.shape[1]))),
                             [], [], num_frames)
    frames = T.rows(embedding, [r.token for r in kept])
    return CompressedSeq(frames, [r.token for r in kept],
                         [(r.start, r.end) for r in kept], num_frames)


def prepare_text_input(src_tokens: list[int], mode: MergeMode, blank_id: int) -> list[int]:
    """Shape text tokens like the compressed speech side: blank-interleaved
    for Average/DiscreteKeepBlank, unchanged otherwise."""
    if blank_id in src_tokens:
        raise ValueError("source tokens must not contain blank")
    if not mode.text_uses_blank:
        return list(src_tokens)
    out: list[int] = []
    for i, tok in enumerate(src_tokens):
        if i > 0:
            out.append(blank_id)
        out.append(tok)
    return out


def frame_span_ms(compressed: CompressedSeq, input_frames: int,
                  base_frame_ms: float) -> float | None:
    """Average input-time duration one merged frame represents."""
    m = len(compressed)
    if m == 0:
        log.warning("frame span undefined for empty compressed sequence")
        return None
    return input_frames * base_frame_ms / m
