"""Transducer loss against a monotonic-path enumeration oracle, predictor
state behavior, joint properties, and beam search vs exhaustive search."""

import itertools
import math

import numpy as np
import pytest

from ctcgmm import tensor as T
from ctcgmm.rng import Rng
from ctcgmm.transducer import beam_search, rnnt_lattice_loss, rnnt_loss

from helpers import (brute_force_rnnt_neg_log_prob, exhaustive_best,
                     lattice_from_networks, make_networks, numerical_grad,
                     rel_err)


class TestJoint:
    def test_zero_output_projection_uniform(self):
        vocab, pred, jnt = make_networks(3, vocab_size=4)
        jnt.out_proj.data[:] = 0.0
        jnt.out_bias.data[:] = 0.0
        lp = jnt.log_probs(np.ones(3), np.ones(4))
        np.testing.assert_allclose(lp, -math.log(5.0), atol=1e-12)

    def test_distribution_sums_to_one(self):
        vocab, pred, jnt = make_networks(4)
        rng = Rng(9)
        for _ in range(10):
            lp = jnt.log_probs(rng.normal(3), rng.normal(4))
            assert abs(np.exp(lp).sum() - 1.0) < 1e-6

    def test_purity(self):
        vocab, pred, jnt = make_networks(5)
        e, d = Rng(1).normal(3), Rng(2).normal(4)
        np.testing.assert_array_equal(jnt.log_probs(e, d), jnt.log_probs(e, d))

    def test_dimension_mismatch_usage_error(self):
        vocab, pred, jnt = make_networks(6)
        with pytest.raises(ValueError):
            jnt.log_probs(np.ones(7), np.ones(4))

    def test_lattice_agrees_with_single_queries(self):
        vocab, pred, jnt = make_networks(7)
        rng = Rng(3)
        enc = rng.normal(4 * 3).reshape(4, 3)
        labels = [0, 1]
        lattice = jnt.lattice_log_probs(
            T.Tensor(enc), pred.prefix_features(labels)).data
        reference = lattice_from_networks(enc, labels, pred, jnt)
        np.testing.assert_allclose(lattice, reference, atol=1e-10)


class TestPredictor:
    def test_step_deterministic(self):
        vocab, pred, _ = make_networks(8)
        s = pred.initial_state()
        s1, h1 = pred.step(s, 0)
        s2, h2 = pred.step(s, 0)
        np.testing.assert_array_equal(h1, h2)

    def test_blank_usage_error(self):
        vocab, pred, _ = make_networks(9)
        with pytest.raises(ValueError):
            pred.step(pred.initial_state(), vocab.blank_id)

    def test_recomputation_matches_incremental(self):
        vocab, pred, _ = make_networks(10)
        prefix = [0, 1, 1, 0]
        state = pred.initial_state()
        h = None
        for tok in prefix:
            state, h = pred.step(state, tok)
        np.testing.assert_allclose(h, pred.features(prefix), atol=1e-6)

    def test_distinct_prefixes_distinct_states(self):
        vocab, pred, _ = make_networks(11)
        feats = [pred.features(p) for p in ([], [0], [1], [0, 1], [1, 0], [0, 0])]
        for a, b in itertools.combinations(feats, 2):
            assert not np.allclose(a, b)

    def test_prefix_features_match_inference_path(self):
        vocab, pred, _ = make_networks(12)
        labels = [1, 0, 1]
        rows = pred.prefix_features(labels).data
        for u in range(len(labels) + 1):
            np.testing.assert_allclose(rows[u], pred.features(labels[:u]), atol=1e-10)


class TestRnntLoss:
    def test_uniform_single_path(self):
        # T=1, U=1, uniform over {token, blank}: P = 0.5 * 0.5
        vocab, pred, jnt = make_networks(13, vocab_size=1)
        jnt.out_proj.data[:] = 0.0
        jnt.out_bias.data[:] = 0.0
        enc = T.Tensor(Rng(4).normal(3).reshape(1, 3))
        loss = rnnt_loss(enc, [0], pred, jnt)
        assert abs(loss.item() - (-math.log(0.25))) < 1e-12

    def test_empty_labels_all_blank_path(self):
        vocab, pred, jnt = make_networks(14)
        enc_data = Rng(5).normal(6).reshape(2, 3)
        loss = rnnt_loss(T.Tensor(enc_data), [], pred, jnt)
        d0 = pred.features([])
        want = -(jnt.log_probs(enc_data[0], d0)[vocab.blank_id]
                 + jnt.log_probs(enc_data[1], d0)[vocab.blank_id])
        assert abs(loss.item() - want) < 1e-10

    def test_exhaustive_path_oracle(self):
        seed = 100
        for t_len in range(1, 5):
            for vocab_size in (1, 2, 3):
                for u_len in range(0, 4):
                    seed += 1
                    vocab, pred, jnt = make_networks(seed, vocab_size=vocab_size)
                    rng = Rng(seed * 7 + 1)
                    labels = [rng.randint(vocab_size) for _ in range(u_len)]
                    enc = rng.normal(t_len * 3).reshape(t_len, 3)
                    got = rnnt_loss(T.Tensor(enc), labels, pred, jnt).item()
                    lp = lattice_from_networks(enc, labels, pred, jnt)
                    want = brute_force_rnnt_neg_log_prob(lp, labels, vocab.blank_id)
                    assert abs(got - want) < 1e-6, (t_len, vocab_size, labels)

    def test_gradient_wrt_lattice_matches_fd(self):
        rng = Rng(200)
        t_len, u_len, classes = 3, 2, 3
        labels = [0, 1]
        logits = T.param(rng.normal(t_len * (u_len + 1) * classes)
                         .reshape(t_len, u_len + 1, classes))
        lp = T.log_softmax(logits, axis=-1)
        loss = rnnt_lattice_loss(lp, labels, blank_id=classes - 1)
        T.backward(loss)

        def f():
            lp2 = T.log_softmax(T.Tensor(logits.data), axis=-1)
            return rnnt_lattice_loss(lp2, labels, blank_id=classes - 1).item()

        num = numerical_grad(f, logits.data)
        assert rel_err(logits.grad, num) <= 1e-4

    def test_gradient_end_to_end_matches_fd(self):
        vocab, pred, jnt = make_networks(201)
        rng = Rng(202)
        enc = T.param(rng.normal(2 * 3).reshape(2, 3))
        labels = [0, 1]
        params = [enc, jnt.enc_proj, jnt.out_proj, jnt.out_bias,
                  pred.embedding, pred.layers[0][0]]

        loss = rnnt_loss(enc, labels, pred, jnt)
        T.backward(loss)
        grads = [p.grad.copy() for p in params]

        def f():
            return rnnt_loss(T.Tensor(enc.data), labels, pred, jnt).item()

        for p, got in zip(params, grads):
            num = numerical_grad(f, p.data)
            assert rel_err(got, num) <= 1e-4


class TestBeamSearch:
    def test_matches_exhaustive_optimum(self):
        for seed in range(25):
            vocab, pred, jnt = make_networks(300 + seed, vocab_size=2)
            rng = Rng(400 + seed)
            t_len = 1 + rng.randint(2)
            enc = rng.normal(t_len * 3).reshape(t_len, 3) * 1.5
            want_tokens, want_logp = exhaustive_best(enc, pred, jnt, max_len=t_len)
            n_hyps = sum(2 ** k for k in range(t_len + 1))
            hyp, _ = beam_search(enc, n_hyps + 5, pred, jnt,
                                 max_len=t_len, frame_emission_cap=2)
            assert hyp.tokens == want_tokens
            assert abs(hyp.log_prob - want_logp) < 1e-6

    def test_blank_dominant_empty_output(self):
        vocab, pred, jnt = make_networks(500, vocab_size=2)
        jnt.out_proj.data[:] = 0.0
        jnt.out_bias.data[:] = 0.0
        jnt.out_bias.data[vocab.blank_id] = math.log(18.0)  # Pr(blank) = 0.9
        for t_len in (1, 3, 6):
            enc = Rng(t_len).normal(t_len * 3).reshape(t_len, 3)
            hyp, _ = beam_search(enc, 4, pred, jnt)
            assert hyp.tokens == []

    def _suppressing_model(self):
        # one-token vocab; the joint emits decisively on +1 frames until the
        # predictor has consumed a token, after which emission is suppressed.
        # This gives naive frame-greedy a well-defined dominant path.
        vocab, pred, jnt = make_networks(501, enc_dim=1, vocab_size=1,
                                         embed=2, hidden=1, joint=2)
        q = pred.features([0])[0]
        assert abs(q) > 0.02
        jnt.enc_proj.data[:] = [[0.5, 0.0]]
        jnt.pred_proj.data[:] = [[0.0, 0.5 / q]]
        jnt.bias.data[:] = 0.0
        jnt.out_proj.data[:] = [[8.0, 0.0], [-16.0, 0.0]]
        jnt.out_bias.data[:] = 0.0
        return vocab, pred, jnt

    def test_w1_equals_greedy_on_decisive_model(self):
        vocab, pred, jnt = self._suppressing_model()
        for frames in ([1.0, -1.0, 1.0], [-1.0, 1.0, -1.0, -1.0], [-1.0, -1.0]):
            enc = np.array(frames).reshape(-1, 1)

            greedy, cap = [], 10
            state, h = pred.initial_state(), np.zeros(pred.hidden_dim)
            for t in range(enc.shape[0]):
                for _ in range(cap):
                    k = int(np.argmax(jnt.log_probs(enc[t], h)))
                    if k == vocab.blank_id:
                        break
                    greedy.append(k)
                    state, h = pred.step(state, k)

            hyp, _ = beam_search(enc, 1, pred, jnt)
            assert hyp.tokens == greedy, frames

    def test_deterministic(self):
        vocab, pred, jnt = make_networks(503)
        enc = Rng(504).normal(6 * 3).reshape(6, 3)
        h1, s1 = beam_search(enc, 4, pred, jnt)
        h2, s2 = beam_search(enc, 4, pred, jnt)
        assert h1.tokens == h2.tokens and h1.log_prob == h2.log_prob
        assert s1.joint_calls == s2.joint_calls

    def test_stats_joint_calls_at_least_frames(self):
        vocab, pred, jnt = make_networks(505)
        for t_len in (1, 4, 9):
            enc = Rng(t_len + 1).normal(t_len * 3).reshape(t_len, 3)
            _, stats = beam_search(enc, 4, pred, jnt)
            assert stats.frames == t_len
            assert stats.joint_calls >= t_len

    def test_joint_calls_scale_linearly_on_constant_model(self):
        vocab, pred, jnt = make_networks(506)
        jnt.out_proj.data[:] = 0.0
        jnt.out_bias.data[:] = 0.0
        jnt.out_bias.data[vocab.blank_id] = 3.0
        counts = {}
        for t_len in (5, 10, 20):
            enc = np.zeros((t_len, 3))
            _, stats = beam_search(enc, 4, pred, jnt)
            counts[t_len] = stats.joint_calls
        # constant per-frame rate: affine-linear growth in T
        assert (counts[10] - counts[5]) / 5 == (counts[20] - counts[10]) / 10

    def test_empty_encoder_usage_error(self):
        vocab, pred, jnt = make_networks(507)
        with pytest.raises(ValueError):
            beam_search(np.zeros((0, 3)), 4, pred, jnt)
        with pytest.raises(ValueError):
            beam_search(np.zeros((2, 3)), 0, pred, jnt)

    def test_log_prob_nonpositive(self):
        vocab, pred, jnt = make_networks(508)
        enc = Rng(509).normal(4 * 3).reshape(4, 3)
        hyp, _ = beam_search(enc, 4, pred, jnt)
        assert hyp.log_prob <= 0.0

    def test_returned_state_matches_recomputation(self):
        vocab, pred, jnt = make_networks(510, vocab_size=3)
        enc = Rng(511).normal(6 * 3).reshape(6, 3) * 2.0
        hyp, _ = beam_search(enc, 4, pred, jnt)
        state = pred.initial_state()
        for tok in hyp.tokens:
            state, _ = pred.step(state, tok)
        for (h_a, c_a), (h_b, c_b) in zip(hyp.pred_state, state):
            np.testing.assert_allclose(h_a, h_b, atol=1e-6)
            np.testing.assert_allclose(c_a, c_b, atol=1e-6)

    def test_joint_calls_track_compression_ratio(self):
        # same model, full-length vs halved encoder input: call counts drop
        # roughly in proportion to M/L
        vocab, pred, jnt = make_networks(512, vocab_size=2)
        enc = Rng(513).normal(20 * 3).reshape(20, 3)
        _, full = beam_search(enc, 4, pred, jnt)
        _, half = beam_search(enc[::2], 4, pred, jnt)
        assert half.joint_calls < full.joint_calls
        ratio = half.joint_calls / full.joint_calls
        assert abs(ratio - 0.5) <= 0.2 * 0.5 + 0.05, ratio
