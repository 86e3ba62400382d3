"""Shared test utilities: independent oracles (finite differences, exhaustive
alignment/path/hypothesis enumeration) and tiny network builders."""

from __future__ import annotations

import itertools
import math

import numpy as np

from ctcgmm import tensor as T
from ctcgmm.ctc import CtcPosteriorSeq, Vocab
from ctcgmm.rng import Rng
from ctcgmm.transducer import JointNetwork, PredictionNetwork


def numerical_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f at x, elementwise."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        dn = f()
        flat[i] = orig
        gf[i] = (up - dn) / (2.0 * step)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def check_grad(build_loss, params: list[T.Tensor], tol: float = 1e-4,
               step: float = 1e-5) -> float:
    """Assert autodiff grads match central differences for every param.

    ``build_loss`` constructs a fresh graph from the params' current data
    and returns the scalar loss Tensor.  Returns the worst relative error.
    """
    loss = build_loss()
    for p in params:
        p.zero_grad()
    T.backward(loss)
    worst = 0.0
    for p in params:
        num = numerical_grad(lambda: build_loss().item(), p.data, step=step)
        got = p.grad if p.grad is not None else np.zeros_like(p.data)
        e = rel_err(got, num)
        worst = max(worst, e)
        assert e <= tol, f"gradient mismatch: rel err {e:.3e} > {tol}"
    return worst


# -- CTC oracles ---------------------------------------------------------------


def brute_force_ctc_neg_log_prob(log_probs: np.ndarray, labels, blank: int) -> float:
    """Enumerate every frame-level path whose collapse equals the labels."""
    L, C = log_probs.shape
    target = list(labels)
    total = 0.0
    for path in itertools.product(range(C), repeat=L):
        merged = [k for k, _ in itertools.groupby(path)]
        if [t for t in merged if t != blank] == target:
            total += math.exp(sum(log_probs[t, k] for t, k in enumerate(path)))
    return -math.log(total) if total > 0 else math.inf


def random_posteriors(rng: Rng, L: int, vocab: Vocab) -> CtcPosteriorSeq:
    logits = rng.normal(L * vocab.num_classes).reshape(L, vocab.num_classes) * 1.5
    return CtcPosteriorSeq(T.Tensor(T.log_softmax_np(logits)), vocab)


# -- transducer oracles ----------------------------------------------------------


def make_networks(seed: int, enc_dim: int = 3, vocab_size: int = 2,
                  embed: int = 3, hidden: int = 4, joint: int = 4):
    rng = Rng(seed)
    vocab = Vocab(vocab_size)
    pred = PredictionNetwork(vocab, embed, hidden, 1, rng.split(1))
    jnt = JointNetwork(enc_dim, hidden, joint, vocab, rng.split(2))
    return vocab, pred, jnt


def lattice_from_networks(enc: np.ndarray, labels, pred, jnt) -> np.ndarray:
    """(T, U+1, V+1) log-probs via the single-query inference path only."""
    dec_rows = [pred.features(labels[:u]) for u in range(len(labels) + 1)]
    return np.stack([[jnt.log_probs(f, d) for d in dec_rows] for f in enc])


def brute_force_rnnt_neg_log_prob(lp: np.ndarray, labels, blank: int) -> float:
    """Sum over all monotonic paths: permutations of T blank moves and
    U label moves where every label move happens on a real frame."""
    t_len, _, _ = lp.shape
    u_len = len(labels)
    total = -np.inf
    moves = [0] * t_len + [1] * u_len
    for order in set(itertools.permutations(moves)):
        t, u, acc, ok = 0, 0, 0.0, True
        for mv in order:
            if mv == 1:
                if t >= t_len:
                    ok = False
                    break
                acc += lp[t, u, labels[u]]
                u += 1
            else:
                acc += lp[t, u, blank]
                t += 1
        if ok:
            total = np.logaddexp(total, acc)
    return -total


def exhaustive_best(enc: np.ndarray, pred, jnt, max_len: int):
    """Independent search: score every sequence up to max_len by its full
    alignment-sum probability, normalized by max(len, 1)."""
    vocab = jnt.vocab
    best_key, best = None, None
    for u_len in range(max_len + 1):
        for labels in itertools.product(range(vocab.size), repeat=u_len):
            lp = lattice_from_networks(enc, list(labels), pred, jnt)
            nlp = brute_force_rnnt_neg_log_prob(lp, list(labels), vocab.blank_id)
            score = -nlp / max(u_len, 1)
            key = (-score, u_len, labels)
            if best_key is None or key < best_key:
                best_key, best = key, (list(labels), -nlp)
    return best
