"""Transducer machinery: prediction network, joint network, lattice loss,
and frame-synchronous beam search with decoding-cost counters.

The loss marginalizes over every monotonic alignment on the (T, U+1)
lattice (blank advances the frame, a label advances the prefix) with an
analytic gradient with respect to the joint's log-probabilities.  The beam
search keeps the prefix-probability folding of the classic algorithm: when
a retained hypothesis extends into another retained hypothesis within a
frame, the mass is summed once at frame start instead of being re-created
by expansion.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ctc import Vocab
from .rng import Rng

log = logging.getLogger(__name__)

_MAX_POPS_PER_FRAME = 10_000


class PredictionNetwork:
    """Token-embedding + unidirectional LSTM over the emitted prefix."""

    def __init__(self, vocab: Vocab, embed_dim: int, hidden_dim: int,
                 num_layers: int, rng: Rng):
        self.vocab = vocab
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.embedding = T.param(None, rng, (vocab.size, embed_dim))
        self.layers = []
        in_dim = embed_dim
        for i in range(num_layers):
            wx = T.param(None, rng, (in_dim, 4 * hidden_dim))
            wh = T.param(None, rng, (hidden_dim, 4 * hidden_dim))
            b = T.param(np.zeros(4 * hidden_dim))
            self.layers.append((wx, wh, b))
            in_dim = hidden_dim

    def named_params(self):
        out = [("pred.embedding", self.embedding)]
        for i, (wx, wh, b) in enumerate(self.layers):
            out += [(f"pred.l{i}.wx", wx), (f"pred.l{i}.wh", wh), (f"pred.l{i}.b", b)]
        return out

    # -- inference path (plain numpy) --------------------------------------

    def initial_state(self):
        z = np.zeros(self.hidden_dim)
        return tuple((z.copy(), z.copy()) for _ in self.layers)

    def step(self, state, token: int):
        """Advance the recurrent state by one non-blank token."""
        if not 0 <= token < self.vocab.size:
            raise ValueError(f"predictor token {token} must be a regular "
                             f"target token (blank forbidden)")
        x = self.embedding.data[token]
        new_state = []
        for (wx, wh, b), (h, c) in zip(self.layers, state):
            gates = x @ wx.data + h @ wh.data + b.data
            i, f, g, o = np.split(gates, 4)
            i, f, o = _sigmoid_np(i), _sigmoid_np(f), _sigmoid_np(o)
            g = np.tanh(g)
            c = f * c + i * g
            h = o * np.tanh(c)
            new_state.append((h, c))
            x = h
        return tuple(new_state), new_state[-1][0]

    def features(self, prefix) -> np.ndarray:
        """h_dec for a full prefix by stateless recomputation."""
        state = self.initial_state()
        h = np.zeros(self.hidden_dim)
        for tok in prefix:
            state, h = self.step(state, tok)
        return h

    # -- training path (autodiff) ------------------------------------------

    def prefix_features(self, labels) -> T.Tensor:
        """Rows of h_dec for all prefixes of ``labels``: (U+1, hidden)."""
        rows = [T.Tensor(np.zeros((1, self.hidden_dim)))]
        states = [(T.Tensor(np.zeros((1, self.hidden_dim))),
                   T.Tensor(np.zeros((1, self.hidden_dim)))) for _ in self.layers]
        for tok in labels:
            if not 0 <= tok < self.vocab.size:
                raise ValueError(f"label {tok} outside target vocab")
            x = T.rows(self.embedding, [tok])
            new_states = []
            for (wx, wh, b), (h, c) in zip(self.layers, states):
                gates = T.add(T.add(T.matmul(x, wx), T.matmul(h, wh)), b)
                hd = self.hidden_dim
                i = T.sigmoid(T.narrow(gates, 1, 0, hd))
                f = T.sigmoid(T.narrow(gates, 1, hd, hd))
                g = T.tanh(T.narrow(gates, 1, 2 * hd, hd))
                o = T.sigmoid(T.narrow(gates, 1, 3 * hd, hd))
                c = T.add(T.mul(f, c), T.mul(i, g))
                h = T.mul(o, T.tanh(c))
                new_states.append((h, c))
                x = h
            states = new_states
            rows.append(states[-1][0])
        return T.concat(rows, axis=0)


class JointNetwork:
    """Additive combination -> tanh -> projection to target vocab + blank."""

    def __init__(self, enc_dim: int, pred_dim: int, joint_dim: int,
                 vocab: Vocab, rng: Rng):
        self.vocab = vocab
        self.enc_proj = T.param(None, rng, (enc_dim, joint_dim))
        self.pred_proj = T.param(None, rng, (pred_dim, joint_dim))
        self.bias = T.param(np.zeros(joint_dim))
        self.out_proj = T.param(None, rng, (joint_dim, vocab.num_classes))
        self.out_bias = T.param(np.zeros(vocab.num_classes))

    def named_params(self):
        return [("joint.enc_proj", self.enc_proj), ("joint.pred_proj", self.pred_proj),
                ("joint.bias", self.bias), ("joint.out_proj", self.out_proj),
                ("joint.out_bias", self.out_bias)]

    def lattice_log_probs(self, enc: T.Tensor, dec: T.Tensor) -> T.Tensor:
        """Log-distributions for every (frame, prefix) pair: (T, U+1, V+1)."""
        t_frames = enc.data.shape[0]
        u_rows = dec.data.shape[0]
        eproj = T.reshape(T.matmul(enc, self.enc_proj), (t_frames, 1, -1))
        dproj = T.reshape(T.matmul(dec, self.pred_proj), (1, u_rows, -1))
        hidden = T.tanh(T.add(T.add(eproj, dproj), self.bias))
        logits = T.add(T.matmul(hidden, self.out_proj), self.out_bias)
        return T.log_softmax(logits, axis=-1)

    def log_probs(self, enc_vec: np.ndarray, dec_vec: np.ndarray) -> np.ndarray:
        """Single (t, y) query on plain arrays; used at decode time."""
        if enc_vec.shape[0] != self.enc_proj.data.shape[0]:
            raise ValueError("encoder feature dimension mismatch")
        if dec_vec.shape[0] != self.pred_proj.data.shape[0]:
            raise ValueError("predictor feature dimension mismatch")
        hidden = np.tanh(enc_vec @ self.enc_proj.data
                         + dec_vec @ self.pred_proj.data + self.bias.data)
        return T.log_softmax_np(hidden @ self.out_proj.data + self.out_bias.data)


def _logaddexp(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    m = a if a > b else b
    return m + math.log1p(math.exp(-abs(a - b)))


def rnnt_lattice_loss(log_probs: T.Tensor, labels, blank_id: int) -> T.Tensor:
    """-log total probability of all monotonic alignments on the lattice.

    ``log_probs`` is (T, U+1, V+1); gradients are the standard negative
    posterior occupancies of blank/label transitions.
    """
    lp = log_probs.data
    t_len, u_rows, _ = lp.shape
    labels = list(labels)
    u_len = len(labels)
    if u_rows != u_len + 1:
        raise ValueError("lattice rows must equal len(labels) + 1")
    blank_lp = lp[:, :, blank_id]                              # (T, U+1)
    label_lp = np.full((t_len, u_len), -np.inf)
    if u_len:
        label_lp = lp[:, np.arange(u_len), labels]             # (T, U)

    blank_list = blank_lp.tolist()
    label_list = label_lp.tolist() if u_len else [[] for _ in range(t_len)]
    neg = -math.inf

    alpha_rows: list[list[float]] = []
    for t in range(t_len):
        row = [neg] * u_rows
        for u in range(u_rows):
            if t == 0 and u == 0:
                row[0] = 0.0
                continue
            stay = alpha_rows[t - 1][u] + blank_list[t - 1][u] if t > 0 else neg
            emit = row[u - 1] + label_list[t][u - 1] if u > 0 else neg
            row[u] = _logaddexp(stay, emit)
        alpha_rows.append(row)
    alpha = np.array(alpha_rows)

    loglike = alpha_rows[t_len - 1][u_len] + blank_list[t_len - 1][u_len]

    beta_rows: list[list[float]] = [[neg] * u_rows for _ in range(t_len)]
    beta_rows[t_len - 1][u_len] = blank_list[t_len - 1][u_len]
    for t in range(t_len - 1, -1, -1):
        for u in range(u_rows - 1, -1, -1):
            if t == t_len - 1 and u == u_len:
                continue
            stay = blank_list[t][u] + beta_rows[t + 1][u] if t < t_len - 1 else neg
            emit = label_list[t][u] + beta_rows[t][u + 1] if u < u_len else neg
            beta_rows[t][u] = _logaddexp(stay, emit)
    beta = np.array(beta_rows)

    grad = np.zeros_like(lp)
    if np.isfinite(loglike):
        # blank transitions
        beta_next = np.full((t_len, u_rows), -np.inf)
        beta_next[: t_len - 1] = beta[1:]
        beta_next[t_len - 1, u_len] = 0.0
        occ_blank = np.exp(alpha + blank_lp + beta_next - loglike)
        grad[:, :, blank_id] -= occ_blank
        # label transitions
        if u_len:
            occ_label = np.exp(alpha[:, :u_len] + label_lp + beta[:, 1:] - loglike)
            for u, tok in enumerate(labels):
                grad[:, u, tok] -= occ_label[:, u]

    def bw(out: T.Tensor):
        log_probs._accumulate(out.grad * grad)

    return T.from_op(np.float64(-loglike), (log_probs,), bw)


def rnnt_loss(enc: T.Tensor, labels, pred: PredictionNetwork,
              jnt: JointNetwork) -> T.Tensor:
    """Transducer loss for one utterance; differentiable end to end."""
    if enc.data.shape[0] < 1:
        raise ValueError("rnnt_loss needs at least one encoder frame")
    dec = pred.prefix_features(labels)
    lattice = jnt.lattice_log_probs(enc, dec)
    return rnnt_lattice_loss(lattice, labels, jnt.vocab.blank_id)


@dataclass
class Hypothesis:
    """Partial/final output sequence with folded log-probability."""

    tokens: list[int]
    log_prob: float
    pred_state: object = None

    def normalized_score(self) -> float:
        return self.log_prob / max(len(self.tokens), 1)


@dataclass
class DecodeStats:
    """Decoding-cost counters for one utterance."""

    joint_calls: int = 0
    frames: int = 0
    wall_time: float = 0.0
    cap_hits: int = 0


@dataclass
class _Entry:
    tokens: tuple
    logp: float
    frame_emissions: int = 0


def _order_key(e: _Entry):
    # most probable first; ties: shorter sequence, then lexicographic
    return (-e.logp, len(e.tokens), e.tokens)


def beam_search(enc_frames: np.ndarray, width: int, pred: PredictionNetwork,
                jnt: JointNetwork, max_len: int | None = None,
                frame_emission_cap: int = 10) -> tuple[Hypothesis, DecodeStats]:
    """Frame-synchronous beam search with prefix folding.

    Per frame: retained hypotheses whose extensions re-create other retained
    hypotheses have that mass folded in once, then the most probable
    hypothesis is repeatedly moved to the emitted set via blank and expanded
    by every label until the emitted set holds ``width`` entries more
    probable than anything pending.  Returns the hypothesis with the best
    length-normalized log-probability and the per-utterance cost counters.
    """
    enc_frames = np.asarray(enc_frames, dtype=np.float64)
    if enc_frames.ndim != 2 or enc_frames.shape[0] == 0:
        raise ValueError("beam_search requires a nonempty (T, D) encoder output")
    if width < 1:
        raise ValueError("beam width must be >= 1")

    t0 = time.perf_counter()
    stats = DecodeStats(frames=enc_frames.shape[0])
    vocab = jnt.vocab
    blank = vocab.blank_id

    # predictor features per prefix, grown incrementally
    state_cache: dict[tuple, tuple] = {(): (pred.initial_state(),
                                            np.zeros(pred.hidden_dim))}

    def dec_feature(prefix: tuple) -> np.ndarray:
        missing = []
        p = prefix
        while p not in state_cache:
            missing.append(p)
            p = p[:-1]
        for q in reversed(missing):
            parent_state, _ = state_cache[q[:-1]]
            state_cache[q] = pred.step(parent_state, q[-1])
        return state_cache[prefix][1]

    beam: dict[tuple, _Entry] = {(): _Entry((), 0.0)}

    for t in range(enc_frames.shape[0]):
        enc_t = enc_frames[t]
        joint_cache: dict[tuple, np.ndarray] = {}

        def joint_lp(prefix: tuple) -> np.ndarray:
            if prefix not in joint_cache:
                joint_cache[prefix] = jnt.log_probs(enc_t, dec_feature(prefix))
                stats.joint_calls += 1
            return joint_cache[prefix]

        pending: dict[tuple, _Entry] = {
            seq: _Entry(seq, e.logp) for seq, e in beam.items()}
        frame_start = dict(pending)

        # prefix folding from the frame-start snapshot
        snapshot = {seq: e.logp for seq, e in pending.items()}
        for seq, entry in pending.items():
            masses = [entry.logp]
            for cut in range(len(seq)):
                prefix = seq[:cut]
                if prefix not in snapshot:
                    continue
                if len(seq) - cut > frame_emission_cap:
                    continue
                chain = snapshot[prefix]
                for u in range(cut, len(seq)):
                    chain += joint_lp(seq[:u])[seq[u]]
                masses.append(chain)
            if len(masses) > 1:
                entry.logp = float(T.logsumexp_np(np.array(masses)))

        emitted: list[_Entry] = []
        pops = 0
        while pending:
            pops += 1
            if pops > _MAX_POPS_PER_FRAME:
                log.warning("abandoning frame %d after %d expansions", t, pops)
                break
            best = min(pending.values(), key=_order_key)
            more_probable = sum(1 for e in emitted if e.logp > best.logp)
            if more_probable >= width:
                break
            del pending[best.tokens]
            lp = joint_lp(best.tokens)
            emitted.append(_Entry(best.tokens, best.logp + lp[blank]))
            if max_len is not None and len(best.tokens) >= max_len:
                continue
            if best.frame_emissions >= frame_emission_cap:
                stats.cap_hits += 1
                log.debug("emission cap hit at frame %d", t)
                continue
            for k in range(vocab.size):
                seq2 = best.tokens + (k,)
                if seq2 in frame_start:
                    continue            # mass already folded at frame start
                cand = _Entry(seq2, best.logp + lp[k], best.frame_emissions + 1)
                prev = pending.get(seq2)
                if prev is None:
                    pending[seq2] = cand
                else:                   # same-frame duplicate: sum the mass
                    prev.logp = float(np.logaddexp(prev.logp, cand.logp))

        emitted.sort(key=_order_key)
        beam = {e.tokens: e for e in emitted[:width]}

    best = min(beam.values(), key=lambda e: (-e.logp / max(len(e.tokens), 1),
                                             len(e.tokens), e.tokens))
    stats.wall_time = time.perf_counter() - t0
    final_state, _ = state_cache.get(best.tokens, (None, None))
    if final_state is None:
        final_state = pred.initial_state()
        for tok in best.tokens:
            final_state, _ = pred.step(final_state, tok)
    hyp = Hypothesis(list(best.tokens), float(best.logp), final_state)
    return hyp, stats


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out
