"""The assembled translation network.

Speech path: stacked input frames -> causal speech encoder -> CTC branch
(loss + per-frame predictions) -> frame merge -> shared causal encoder ->
transducer.  Text path: source-token embeddings (blank-interleaved when the
merge mode keeps blanks) -> the same shared encoder and transducer.  One
objective combines the CTC term on speech, the translation transducer term
on speech, and the translation transducer term on text.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .compress import (AttentionMergeParams, CompressedSeq, MergeMode,
                       merge_attention, merge_average, merge_discrete,
                       prepare_text_input, segment_runs, sinusoidal_embedding)
from .config import ModelConfig
from .ctc import (CtcPosteriorSeq, PredictionSeq, Vocab, ctc_feasible,
                  ctc_loss, ctc_predict_argmax, ctc_predict_sampled)
from .rng import Rng
from .transducer import (DecodeStats, JointNetwork, PredictionNetwork,
                         beam_search)

log = logging.getLogger(__name__)


class CausalEncoder:
    """Stack of pre-norm causal self-attention blocks with tanh FFNs.

    Output at position t depends only on inputs at positions <= t, which is
    the streaming constraint both encoders must satisfy.
    """

    def __init__(self, name: str, input_dim: int, dim: int, layers: int,
                 ffn_mult: int, rng: Rng):
        self.name = name
        self.dim = dim
        self.project_input = input_dim != dim
        if self.project_input:
            self.in_proj = T.param(None, rng, (input_dim, dim))
        self.blocks = []
        for _ in range(layers):
            blk = {
                "ln1_g": T.param(np.ones(dim)), "ln1_b": T.param(np.zeros(dim)),
                "wq": T.param(None, rng, (dim, dim)),
                "wk": T.param(None, rng, (dim, dim)),
                "wv": T.param(None, rng, (dim, dim)),
                "wo": T.param(None, rng, (dim, dim), scale=0.5 / math.sqrt(dim)),
                "ln2_g": T.param(np.ones(dim)), "ln2_b": T.param(np.zeros(dim)),
                "w1": T.param(None, rng, (dim, ffn_mult * dim)),
                "b1": T.param(np.zeros(ffn_mult * dim)),
                "w2": T.param(None, rng, (ffn_mult * dim, dim),
                              scale=0.5 / math.sqrt(ffn_mult * dim)),
                "b2": T.param(np.zeros(dim)),
            }
            self.blocks.append(blk)
        self.ln_out_g = T.param(np.ones(dim))
        self.ln_out_b = T.param(np.zeros(dim))

    def named_params(self):
        out = []
        if self.project_input:
            out.append((f"{self.name}.in_proj", self.in_proj))
        for i, blk in enumerate(self.blocks):
            for key, t in blk.items():
                out.append((f"{self.name}.b{i}.{key}", t))
        out += [(f"{self.name}.ln_out_g", self.ln_out_g),
                (f"{self.name}.ln_out_b", self.ln_out_b)]
        return out

    def forward(self, x: T.Tensor) -> T.Tensor:
        n = x.data.shape[0]
        if self.project_input:
            x = T.matmul(x, self.in_proj)
        x = T.add(x, T.Tensor(sinusoidal_embedding(range(n), self.dim)))
        mask = np.triu(np.full((n, n), -np.inf), k=1)   # future positions
        scale = 1.0 / math.sqrt(self.dim)
        for blk in self.blocks:
            h = T.layer_norm(x, blk["ln1_g"], blk["ln1_b"])
            q = T.matmul(h, blk["wq"])
            k = T.matmul(h, blk["wk"])
            v = T.matmul(h, blk["wv"])
            scores = T.add(T.mul(T.matmul(q, _transpose(k)), scale), T.Tensor(mask))
            att = T.softmax(scores, axis=-1)
            x = T.add(x, T.matmul(T.matmul(att, v), blk["wo"]))
            h = T.layer_norm(x, blk["ln2_g"], blk["ln2_b"])
            ffn = T.matmul(T.tanh(T.add(T.matmul(h, blk["w1"]), blk["b1"])), blk["w2"])
            x = T.add(x, T.add(ffn, blk["b2"]))
        return T.layer_norm(x, self.ln_out_g, self.ln_out_b)


def _transpose(t: T.Tensor) -> T.Tensor:
    out_data = t.data.T

    def bw(out: T.Tensor):
        t._accumulate(out.grad.T)

    return T.from_op(out_data, (t,), bw)


@dataclass
class SpeechBatch:
    """One speech example: raw features with source and target labels."""

    features: np.ndarray
    src_labels: list[int]
    tgt_labels: list[int]


@dataclass
class TextBatch:
    """One paired-text example from the translation corpus."""

    src_tokens: list[int]
    tgt_tokens: list[int]


Batch = SpeechBatch | TextBatch


@dataclass
class LossBreakdown:
    """Objective terms; total = ctc_weight * ctc_asr + rnnt_st + rnnt_mt."""

    ctc_asr: float
    rnnt_st: float
    rnnt_mt: float
    total: T.Tensor


class CtcGmmModel:
    """Speech/text dual-input transducer with CTC-guided frame merging."""

    def __init__(self, config: ModelConfig, rng: Rng | None = None):
        config.validate()
        self.config = config
        rng = rng if rng is not None else Rng(config.seed)
        self.src_vocab = Vocab(config.src_vocab)
        self.tgt_vocab = Vocab(config.tgt_vocab)
        d = config.encoder_dim

        self.speech_encoder = CausalEncoder(
            "speech_enc", config.feature_dim * config.time_reduction, d,
            config.speech_encoder_layers, config.ffn_mult, rng.split(1))
        self.ctc_head_w = T.param(None, rng.split(2), (d, self.src_vocab.num_classes))
        self.ctc_head_b = T.param(np.zeros(self.src_vocab.num_classes))
        self.text_embedding = T.param(None, rng.split(3),
                                      (self.src_vocab.num_classes, d), scale=0.5)
        if config.merge.is_discrete and not config.share_discrete_embedding:
            self.discrete_embedding = T.param(None, rng.split(4),
                                              (self.src_vocab.num_classes, d), scale=0.5)
        else:
            self.discrete_embedding = self.text_embedding
        self.shared_encoder = CausalEncoder(
            "shared_enc", d, d, config.shared_encoder_layers,
            config.ffn_mult, rng.split(5))
        if config.merge is MergeMode.ATTENTION:
            self.merge_params = AttentionMergeParams(
                T.param(None, rng.split(6), (d, d)),
                T.param(None, rng.split(7), (d, d)), d)
        else:
            self.merge_params = None
        self.predictor = PredictionNetwork(
            self.tgt_vocab, config.pred_embed_dim, config.pred_hidden_dim,
            config.pred_layers, rng.split(8))
        self.joint = JointNetwork(d, config.pred_hidden_dim, config.joint_dim,
                                  self.tgt_vocab, rng.split(9))

    def named_params(self) -> list[tuple[str, T.Tensor]]:
        out = self.speech_encoder.named_params()
        out += [("ctc_head.w", self.ctc_head_w), ("ctc_head.b", self.ctc_head_b),
                ("text_embedding", self.text_embedding)]
        if self.discrete_embedding is not self.text_embedding:
            out.append(("discrete_embedding", self.discrete_embedding))
        out += self.shared_encoder.named_params()
        if self.merge_params is not None:
            out += [("merge.key_proj", self.merge_params.key_proj),
                    ("merge.value_proj", self.merge_params.value_proj)]
        out += self.predictor.named_params()
        out += self.joint.named_params()
        return out

    # -- speech path ---------------------------------------------------------

    def stack_frames(self, features: np.ndarray) -> np.ndarray:
        tr = self.config.time_reduction
        if features.ndim != 2 or features.shape[1] != self.config.feature_dim:
            raise ValueError(f"features must be (frames, {self.config.feature_dim})")
        if features.shape[0] < tr:
            raise ValueError(f"need at least {tr} frames, got {features.shape[0]}")
        length = features.shape[0] // tr
        return features[: length * tr].reshape(length, tr * self.config.feature_dim)

    def forward_speech(self, features: np.ndarray, sampled: bool = False,
                       rng: Rng | None = None) -> tuple[CtcPosteriorSeq, CompressedSeq]:
        """Encode, predict per-frame tokens, and merge frames."""
        stacked = T.Tensor(self.stack_frames(features))
        h = self.speech_encoder.forward(stacked)
        logits = T.add(T.matmul(h, self.ctc_head_w), self.ctc_head_b)
        posteriors = CtcPosteriorSeq(T.log_softmax(logits, axis=-1), self.src_vocab)
        if sampled:
            if rng is None:
                raise ValueError("sampled prediction needs an rng")
            preds = ctc_predict_sampled(posteriors, self.config.top_n, rng)
        else:
            preds = ctc_predict_argmax(posteriors)
        return posteriors, self.merge_frames(h, preds)

    def merge_frames(self, h: T.Tensor, preds: PredictionSeq) -> CompressedSeq:
        mode = self.config.merge
        n = len(preds)
        if mode is MergeMode.NONE:
            return CompressedSeq(h, list(preds.tokens),
                                 [(i, i) for i in range(n)], n)
        runs = segment_runs(preds)
        if mode is MergeMode.AVERAGE:
            return merge_average(h, runs)
        if mode is MergeMode.ATTENTION:
            return merge_attention(h, runs, self.merge_params,
                                   self.src_vocab.blank_id)
        keep = mode is MergeMode.DISCRETE_KEEP_BLANK
        return merge_discrete(runs, self.discrete_embedding, keep, n)

    # -- text path -----------------------------------------------------------

    def forward_text(self, src_tokens: list[int]) -> T.Tensor:
        """Blank-interleave per the merge mode, then embed: (M, D)."""
        self.src_vocab.check_labels(src_tokens)
        processed = prepare_text_input(src_tokens, self.config.merge,
                                       self.src_vocab.blank_id)
        return T.rows(self.text_embedding, processed)

    # -- objective -----------------------------------------------------------

    def compute_loss(self, batch: Batch, sampled: bool = True,
                     rng: Rng | None = None) -> LossBreakdown | None:
        """Objective terms for one example; None when the example must be
        skipped (infeasible CTC labels or an empty merged sequence)."""
        from .transducer import rnnt_loss

        if isinstance(batch, TextBatch):
            if not batch.tgt_tokens:
                raise ValueError("text batch needs nonempty targets")
            emb = self.forward_text(batch.src_tokens)
            enc = self.shared_encoder.forward(emb)
            mt = rnnt_loss(enc, batch.tgt_tokens, self.predictor, self.joint)
            return LossBreakdown(0.0, 0.0, mt.item(), mt)

        if not batch.src_labels or not batch.tgt_labels:
            raise ValueError("speech batch needs nonempty labels")
        posteriors, compressed = self.forward_speech(batch.features, sampled, rng)
        if not ctc_feasible(batch.src_labels, len(posteriors)):
            log.warning("skipping speech example: CTC labels infeasible "
                        "(%d labels, %d frames)", len(batch.src_labels),
                        len(posteriors))
            return None
        if len(compressed) == 0:
            log.warning("skipping speech example: empty merged sequence")
            return None
        asr = ctc_loss(posteriors, batch.src_labels)
        enc = self.shared_encoder.forward(compressed.frames)
        st = rnnt_loss(enc, batch.tgt_labels, self.predictor, self.joint)
        total = T.add(T.mul(asr, self.config.ctc_weight), st)
        return LossBreakdown(asr.item(), st.item(), 0.0, total)

    # -- inference -----------------------------------------------------------

    def decode(self, features: np.ndarray, width: int | None = None
               ) -> tuple[list[int], DecodeStats, CompressedSeq]:
        """Argmax-predicted merge, shared encoding, then beam search."""
        width = width if width is not None else self.config.beam_width
        _, compressed = self.forward_speech(features, sampled=False)
        if len(compressed) == 0:
            log.warning("empty merged sequence: emitting empty hypothesis")
            return [], DecodeStats(), compressed
        enc = self.shared_encoder.forward(compressed.frames)
        hyp, stats = beam_search(enc.data, width, self.predictor, self.joint)
        return hyp.tokens, stats, compressed
