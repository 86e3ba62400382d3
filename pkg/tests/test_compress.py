"""Frame-merge behavior: run segmentation, the three merge strategies,
text-side processing, and the collapse-consistency anchor."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctcgmm import tensor as T
from ctcgmm.compress import (AttentionMergeParams, MergeMode, Run,
                             frame_span_ms, merge_attention, merge_average,
                             merge_discrete, prepare_text_input, segment_runs,
                             sinusoidal_embedding)
from ctcgmm.ctc import PredictionSeq, collapse
from ctcgmm.rng import Rng

from helpers import check_grad

BLANK = 3  # tests use a 3-token vocab {0,1,2} with blank = 3

pred_lists = st.lists(st.integers(min_value=0, max_value=BLANK), min_size=1, max_size=24)


def preds_of(tokens):
    return PredictionSeq(list(tokens), BLANK)


class TestSegmentRuns:
    def test_definition_forced(self):
        runs = segment_runs(preds_of([0, 0, BLANK, 1, 1, 1]))
        assert runs == [Run(0, 1, 0), Run(2, 2, BLANK), Run(3, 5, 1)]

    def test_singleton(self):
        assert segment_runs(preds_of([0])) == [Run(0, 0, 0)]

    def test_no_merging(self):
        runs = segment_runs(preds_of([0, 1, 0]))
        assert [len(r) for r in runs] == [1, 1, 1]

    def test_empty_usage_error(self):
        with pytest.raises(ValueError):
            segment_runs(preds_of([]))

    @given(pred_lists)
    @settings(max_examples=200, deadline=None)
    def test_runs_are_maximal_and_cover(self, tokens):
        runs = segment_runs(preds_of(tokens))
        assert runs[0].start == 0 and runs[-1].end == len(tokens) - 1
        for a, b in zip(runs, runs[1:]):
            assert b.start == a.end + 1
            assert a.token != b.token
        for r in runs:
            assert all(tokens[i] == r.token for i in range(r.start, r.end + 1))


class TestMergeAverage:
    def _h(self, L, D=4, seed=0):
        return T.Tensor(Rng(seed).normal(L * D).reshape(L, D))

    def test_definition_forced(self):
        h = self._h(6)
        runs = segment_runs(preds_of([0, 0, BLANK, 1, 1, 1]))
        out = merge_average(h, runs)
        assert len(out) == 3
        np.testing.assert_allclose(out.frames.data[0],
                                   (h.data[0] + h.data[1]) / 2, atol=1e-12)
        assert out.tokens == [0, BLANK, 1]
        assert out.spans == [(0, 1), (2, 2), (3, 5)]

    def test_full_merge(self):
        h = self._h(5)
        out = merge_average(h, segment_runs(preds_of([2] * 5)))
        assert len(out) == 1
        np.testing.assert_allclose(out.frames.data[0], h.data.mean(axis=0), atol=1e-12)

    def test_identity_when_all_distinct(self):
        h = self._h(3)
        out = merge_average(h, segment_runs(preds_of([0, 1, 2])))
        np.testing.assert_allclose(out.frames.data, h.data, atol=1e-15)

    @given(pred_lists)
    @settings(max_examples=100, deadline=None)
    def test_sum_preservation(self, tokens):
        h = self._h(len(tokens), seed=7)
        runs = segment_runs(preds_of(tokens))
        out = merge_average(h, runs)
        assert len(out) == len(runs)
        for m, r in enumerate(runs):
            scaled = out.frames.data[m] * len(r)
            np.testing.assert_allclose(
                scaled, h.data[r.start:r.end + 1].sum(axis=0), atol=1e-10)

    def test_gradient_flows_to_h(self):
        rng = Rng(3)
        h = T.param(rng.normal(20).reshape(5, 4))
        runs = segment_runs(preds_of([0, 0, 1, BLANK, BLANK]))

        def build():
            out = merge_average(h, runs)
            return T.tsum(T.mul(out.frames, out.frames))

        check_grad(build, [h], tol=1e-4)


class TestMergeAttention:
    def _setup(self, L, D=4, seed=1, zero_key=False, identity_value=False):
        rng = Rng(seed)
        h = T.Tensor(rng.normal(L * D).reshape(L, D))
        key = np.zeros((D, D)) if zero_key else rng.normal(D * D).reshape(D, D)
        val = np.eye(D) if identity_value else rng.normal(D * D).reshape(D, D)
        return h, AttentionMergeParams(T.Tensor(key), T.Tensor(val), D)

    def test_blank_absorbed_into_following_run(self):
        h, params = self._setup(3)
        out = merge_attention(h, segment_runs(preds_of([BLANK, 0, 0])), params, BLANK)
        assert len(out) == 1
        assert out.tokens == [0]
        assert out.spans == [(0, 2)]

    def test_zero_key_uniform_weights(self):
        h, params = self._setup(2, zero_key=True, identity_value=True)
        out = merge_attention(h, segment_runs(preds_of([0, 1])), params, BLANK)
        np.testing.assert_allclose(out.frames.data, h.data, atol=1e-12)

    def test_windows(self):
        h, params = self._setup(6)
        out = merge_attention(h, segment_runs(preds_of([0, 0, BLANK, 1, 1, 1])),
                              params, BLANK)
        assert len(out) == 2
        assert out.spans == [(0, 1), (2, 5)]

    def test_trailing_blank_dropped(self):
        h, params = self._setup(4)
        out = merge_attention(h, segment_runs(preds_of([0, 1, BLANK, BLANK])),
                              params, BLANK)
        assert out.tokens == [0, 1]

    def test_all_blank_empty(self):
        h, params = self._setup(3)
        out = merge_attention(h, segment_runs(preds_of([BLANK] * 3)), params, BLANK)
        assert len(out) == 0

    def test_uniform_window_average_when_key_zero(self):
        h, params = self._setup(5, zero_key=True, identity_value=True)
        out = merge_attention(h, segment_runs(preds_of([BLANK, 0, 0, 0, 0])),
                              params, BLANK)
        np.testing.assert_allclose(out.frames.data[0], h.data.mean(axis=0), atol=1e-12)

    def test_gradient_matches_fd(self):
        rng = Rng(9)
        D = 3
        h = T.param(rng.normal(5 * D).reshape(5, D))
        kp = T.param(rng.normal(D * D).reshape(D, D))
        vp = T.param(rng.normal(D * D).reshape(D, D))
        runs = segment_runs(preds_of([0, 0, BLANK, 1, 1]))

        def build():
            params = AttentionMergeParams(kp, vp, D)
            out = merge_attention(h, runs, params, BLANK)
            return T.tsum(T.mul(out.frames, out.frames))

        check_grad(build, [h, kp, vp], tol=1e-4)


class TestMergeDiscrete:
    def _embedding(self, D=4):
        return T.Tensor(Rng(2).normal((BLANK + 1) * D).reshape(BLANK + 1, D))

    def test_keep_blank(self):
        emb = self._embedding()
        out = merge_discrete(segment_runs(preds_of([0, 0, BLANK, 1])), emb, True, 4)
        assert out.tokens == [0, BLANK, 1]
        np.testing.assert_allclose(out.frames.data, emb.data[[0, BLANK, 1]])

    def test_remove_blank(self):
        emb = self._embedding()
        out = merge_discrete(segment_runs(preds_of([0, 0, BLANK, 1])), emb, False, 4)
        assert out.tokens == [0, 1]

    def test_all_blank_removed_is_empty(self):
        emb = self._embedding()
        out = merge_discrete(segment_runs(preds_of([BLANK, BLANK])), emb, False, 2)
        assert len(out) == 0
        assert out.frames.data.shape == (0, 4)

    def test_out_of_range_token_usage_error(self):
        emb = self._embedding()
        with pytest.raises(ValueError):
            merge_discrete([Run(0, 0, BLANK + 5)], emb, True, 1)

    @given(pred_lists)
    @settings(max_examples=200, deadline=None)
    def test_remove_blank_tokens_equal_collapse(self, tokens):
        # the modality-matching consistency anchor
        emb = self._embedding()
        preds = preds_of(tokens)
        out = merge_discrete(segment_runs(preds), emb, False, len(tokens))
        assert out.tokens == collapse(preds)


class TestTextInput:
    def test_average_interleaves_blank(self):
        assert prepare_text_input([5, 6], MergeMode.AVERAGE, BLANK) == [5, BLANK, 6]

    def test_attention_unchanged(self):
        assert prepare_text_input([5, 6], MergeMode.ATTENTION, BLANK) == [5, 6]

    def test_singleton_not_interleaved(self):
        assert prepare_text_input([5], MergeMode.AVERAGE, BLANK) == [5]

    def test_keep_blank_matches_speech_pattern(self):
        # error-free predictions with blanks between tokens: same pattern
        src = [0, 1, 2]
        preds = preds_of([0, 0, BLANK, 1, BLANK, 2, 2])
        emb = T.Tensor(Rng(2).normal((BLANK + 1) * 2).reshape(BLANK + 1, 2))
        speech = merge_discrete(segment_runs(preds), emb, True, len(preds))
        text = prepare_text_input(src, MergeMode.DISCRETE_KEEP_BLANK, BLANK)
        assert speech.tokens == text

    def test_blank_in_source_rejected(self):
        with pytest.raises(ValueError):
            prepare_text_input([0, BLANK], MergeMode.AVERAGE, BLANK)


class TestFrameSpan:
    def test_no_compression_baseline(self):
        h = T.Tensor(np.zeros((10, 2)))
        out = merge_average(h, segment_runs(preds_of(list(range(3)) * 3 + [0])))
        # identity merge: 10 runs; 40 raw frames at 10 ms each -> 40 ms/frame
        assert len(out) == 10
        assert frame_span_ms(out, 40, 10.0) == pytest.approx(40.0)

    def test_compression_arithmetic(self):
        class Fake:
            def __len__(self):
                return 20
        assert frame_span_ms(Fake(), 100, 40.0) == pytest.approx(200.0)

    def test_empty_undefined(self):
        class Fake:
            def __len__(self):
                return 0
        assert frame_span_ms(Fake(), 100, 40.0) is None


class TestModeCounts:
    @given(pred_lists)
    @settings(max_examples=200, deadline=None)
    def test_output_counts_per_mode(self, tokens):
        preds = preds_of(tokens)
        runs = segment_runs(preds)
        nonblank = [r for r in runs if r.token != BLANK]
        D = 3
        h = T.Tensor(Rng(1).normal(len(tokens) * D).reshape(len(tokens), D))
        emb = T.Tensor(Rng(2).normal((BLANK + 1) * D).reshape(BLANK + 1, D))
        params = AttentionMergeParams(T.Tensor(np.eye(D)), T.Tensor(np.eye(D)), D)

        assert len(merge_average(h, runs)) == len(runs)
        assert len(merge_discrete(runs, emb, True, len(tokens))) == len(runs)
        assert len(merge_attention(h, runs, params, BLANK)) == len(nonblank)
        assert len(merge_discrete(runs, emb, False, len(tokens))) == len(nonblank)
        assert len(runs) <= len(tokens)


class TestSinusoidal:
    def test_shape_and_range(self):
        pe = sinusoidal_embedding(range(8), 16)
        assert pe.shape == (8, 16)
        assert np.all(np.abs(pe) <= 1.0)

    def test_position_zero(self):
        pe = sinusoidal_embedding([0], 8)[0]
        np.testing.assert_allclose(pe[0::2], 0.0, atol=1e-15)
        np.testing.assert_allclose(pe[1::2], 1.0, atol=1e-15)

    def test_base_10000_formula(self):
        dim = 8
        pe = sinusoidal_embedding([3], dim)[0]
        for i in range(dim // 2):
            angle = 3.0 / 10000 ** (2 * i / dim)
            assert pe[2 * i] == pytest.approx(np.sin(angle))
            assert pe[2 * i + 1] == pytest.approx(np.cos(angle))
