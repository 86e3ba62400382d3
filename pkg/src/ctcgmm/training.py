"""Optimizer and training loop.

Each optimization step consumes one speech mini-batch and, when paired-text
training is on, one text mini-batch of the same example count.  Gradients
from the examples of a step accumulate in a fixed order, so a seeded run is
bit-reproducible.  A non-finite loss aborts with a diagnostic rather than
silently poisoning the parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import Utterance, features_for
from .model import CtcGmmModel, SpeechBatch, TextBatch
from .rng import Rng

log = logging.getLogger(__name__)


class Adam:
    """Adaptive moment estimation with linear warmup on the learning rate."""

    def __init__(self, params: list[tuple[str, T.Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9,
                 warmup_steps: int = 100, grad_clip: float = 5.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.warmup_steps = max(warmup_steps, 1)
        self.grad_clip = grad_clip
        self.step_count = 0
        self.moments = {name: (np.zeros_like(p.data), np.zeros_like(p.data))
                        for name, p in params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def clip_gradients(self) -> float:
        total = 0.0
        for _, p in self.params:
            if p.grad is not None:
                total += float(np.sum(p.grad ** 2))
        norm = np.sqrt(total)
        if self.grad_clip > 0 and norm > self.grad_clip:
            scale = self.grad_clip / norm
            for _, p in self.params:
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self) -> None:
        self.step_count += 1
        lr = self.lr * min(1.0, self.step_count / self.warmup_steps)
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.step_count
        corr2 = 1.0 - b2 ** self.step_count
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.moments[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


@dataclass
class MetricLine:
    step: int
    name: str
    value: float

    def render(self) -> str:
        return f"{self.step}\t{self.name}\t{self.value!r}"


class _Cycler:
    """Deterministic shuffled epochs over a corpus."""

    def __init__(self, items: list, rng: Rng):
        if not items:
            raise ValueError("corpus must be nonempty")
        self.items = list(items)
        self.rng = rng
        self.order: list[int] = []
        self.pos = 0

    def take(self, n: int) -> list:
        out = []
        for _ in range(n):
            if self.pos >= len(self.order):
                self.order = list(range(len(self.items)))
                self.rng.shuffle(self.order)
                self.pos = 0
            out.append(self.items[self.order[self.pos]])
            self.pos += 1
        return out


def train(run: RunConfig, speech_corpus: list[Utterance],
          mt_corpus: list[Utterance] | None, task_spec=None,
          checkpoint_fn=None) -> tuple[CtcGmmModel, list[MetricLine]]:
    """Train a model from scratch; returns it with the metric log.

    ``task_spec`` regenerates features for utterances that do not carry
    them.  ``checkpoint_fn(model, step)`` is called every
    ``checkpoint_every`` steps and at the end.
    """
    cfg = run.model
    cfg.validate()
    rng = Rng(cfg.seed)
    model = CtcGmmModel(cfg, rng.split(1))
    sample_rng = rng.split(2)
    speech_cycle = _Cycler(speech_corpus, rng.split(3))
    text_cycle = None
    if cfg.use_mt_text:
        if not mt_corpus:
            raise ValueError("use_mt_text=true requires a text corpus")
        text_cycle = _Cycler(mt_corpus, rng.split(4))

    opt = Adam(model.named_params(), cfg.learning_rate, cfg.adam_beta1,
               cfg.adam_beta2, cfg.adam_eps, cfg.warmup_steps, cfg.grad_clip)
    metrics: list[MetricLine] = []
    window: dict[str, list[float]] = {"total": [], "ctc_asr": [],
                                      "rnnt_st": [], "rnnt_mt": []}
    speech_seen = 0
    text_seen = 0

    for step in range(1, run.steps + 1):
        opt.zero_grad()
        batch: list = [
            SpeechBatch(features_for(utt, task_spec), utt.src_tokens, utt.tgt_tokens)
            for utt in speech_cycle.take(run.batch_size)]
        speech_seen += len(batch)
        if text_cycle is not None:
            text = [TextBatch(utt.src_tokens, utt.tgt_tokens)
                    for utt in text_cycle.take(run.batch_size)]
            text_seen += len(text)
            batch += text

        used = 0
        sums = {"total": 0.0, "ctc_asr": 0.0, "rnnt_st": 0.0, "rnnt_mt": 0.0}
        for example in batch:
            breakdown = model.compute_loss(example, sampled=True, rng=sample_rng)
            if breakdown is None:
                continue
            used += 1
            scaled = T.mul(breakdown.total, 1.0 / run.batch_size)
            if not np.isfinite(scaled.data):
                raise RuntimeError(
                    f"non-finite loss at step {step}: ctc={breakdown.ctc_asr} "
                    f"st={breakdown.rnnt_st} mt={breakdown.rnnt_mt}")
            T.backward(scaled)
            sums["total"] += breakdown.ctc_asr * cfg.ctc_weight \
                + breakdown.rnnt_st + breakdown.rnnt_mt
            sums["ctc_asr"] += breakdown.ctc_asr
            sums["rnnt_st"] += breakdown.rnnt_st
            sums["rnnt_mt"] += breakdown.rnnt_mt
        if used == 0:
            log.warning("step %d: every example skipped", step)
            continue
        opt.clip_gradients()
        opt.step()

        for key in window:
            window[key].append(sums[key] / used)
        if step % run.log_every == 0 or step == run.steps:
            for key, vals in window.items():
                if vals:
                    metrics.append(MetricLine(step, f"loss_{key}",
                                              float(np.mean(vals))))
                window[key] = []
            metrics.append(MetricLine(step, "lr",
                                      opt.lr * min(1.0, opt.step_count / opt.warmup_steps)))
        if checkpoint_fn is not None and (step % run.checkpoint_every == 0
                                          or step == run.steps):
            checkpoint_fn(model, step)

    metrics.append(MetricLine(run.steps, "speech_examples", float(speech_seen)))
    metrics.append(MetricLine(run.steps, "text_examples", float(text_seen)))
    return model, metrics


def write_metrics(path: str, metrics: list[MetricLine]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in metrics:
            fh.write(line.render() + "\n")
