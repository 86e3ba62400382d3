"""Command-line surface: gen-data, train, decode, eval, bench.

Every command exits 0 on success and 1 with a single-line diagnostic on
failure.  All outputs are deterministic given config + seed (bench wall
times excepted).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .checkpoint import check_config_compatible, load_checkpoint, save_checkpoint
from .compress import frame_span_ms
from .config import SEED_ENV_VAR, config_field_docs, load_run_config
from .data import (SyntheticTaskSpec, contains_entity, dump_task_spec,
                   features_for, gen_eval_corpus, gen_mt_corpus,
                   gen_speech_corpus, load_task_spec, read_corpus,
                   read_entities, write_corpus, write_entities)
from .metrics import bleu, entity_recall, token_accuracy
from .rng import Rng
from .training import train, write_metrics

ALL_BENCH_MODES = ("baseline", "tr8", "average", "attention",
                   "discrete_keep_blank", "discrete_remove_blank")


def cmd_gen_data(args) -> int:
    spec = load_task_spec(args.spec) if args.spec else SyntheticTaskSpec()
    if args.seed is not None:
        spec.seed = args.seed
    spec.validate()
    if args.n_speech <= 0:
        raise ValueError("n-speech must be positive (empty corpus rejected)")
    if args.n_mt <= 0:
        raise ValueError("n-mt must be positive (empty corpus rejected)")

    rng = Rng(spec.seed)
    speech = gen_speech_corpus(spec, args.n_speech, rng.split(11))
    mt = gen_mt_corpus(spec, args.n_mt, rng.split(12))
    write_corpus(args.out_speech, speech)
    write_corpus(args.out_mt, mt)

    stats = [
        ("speech", "utterances", len(speech)),
        ("speech", "entity_occurrences",
         sum(contains_entity(u.src_tokens, spec) for u in speech)),
        ("mt", "utterances", len(mt)),
        ("mt", "entity_occurrences",
         sum(contains_entity(u.src_tokens, spec) for u in mt)),
    ]
    if args.out_eval:
        if args.n_eval <= 0:
            raise ValueError("n-eval must be positive when --out-eval is given")
        eval_utts = gen_eval_corpus(spec, args.n_eval, rng.split(13),
                                    entity_rate=args.eval_entity_rate)
        write_corpus(args.out_eval, eval_utts)
        if args.out_entities:
            write_entities(args.out_entities, eval_utts)
        stats += [("eval", "utterances", len(eval_utts)),
                  ("eval", "entity_occurrences",
                   sum(len(u.entity_targets) for u in eval_utts))]
    for corpus, name, value in stats:
        print(f"{corpus}\t{name}\t{value}")
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    if not run.task_spec:
        raise ValueError("config must set task_spec for feature generation")
    spec = load_task_spec(run.task_spec)
    speech = read_corpus(run.speech_corpus)
    mt = read_corpus(run.mt_corpus) if run.model.use_mt_text else None

    def checkpoint_fn(model, step):
        save_checkpoint(model, run.checkpoint_path)

    model, metrics = train(run, speech, mt, task_spec=spec,
                           checkpoint_fn=checkpoint_fn)
    write_metrics(run.metric_log_path, metrics)
    print(f"trained\t{run.steps}\tsteps")
    print(f"checkpoint\t{run.checkpoint_path}")
    print(f"metrics\t{run.metric_log_path}")
    return 0


def _decode_corpus(model, utterances, spec, width):
    results = []
    for utt in utterances:
        features = features_for(utt, spec)
        tokens, stats, compressed = model.decode(features, width)
        results.append((utt, tokens, stats, compressed, features.shape[0]))
    return results


def cmd_decode(args) -> int:
    run = load_run_config(args.config)
    model = load_checkpoint(args.checkpoint)
    check_config_compatible(run.model, model.config)
    spec = load_task_spec(run.task_spec) if run.task_spec else None
    utterances = read_corpus(args.input)
    width = args.beam if args.beam else run.model.beam_width

    results = _decode_corpus(model, utterances, spec, width)
    with open(args.output, "w", encoding="utf-8") as fh:
        for utt, tokens, _, _, _ in results:
            fh.write(f"{utt.uid}\t{' '.join(str(t) for t in tokens)}\n")

    total_calls = sum(s.joint_calls for _, _, s, _, _ in results)
    total_frames = sum(s.frames for _, _, s, _, _ in results)
    total_time = sum(s.wall_time for _, _, s, _, _ in results)
    print(f"utterances\t{len(results)}")
    print(f"joint_calls\t{total_calls}")
    print(f"frames\t{total_frames}")
    print(f"wall_time\t{total_time:.4f}")
    print(f"hypotheses\t{args.output}")
    return 0


def _read_hypotheses(path: str) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise ValueError(f"{path}:{lineno}: expected id<TAB>tokens")
            out[parts[0]] = [int(t) for t in parts[1].split()] if parts[1].strip() else []
    return out


def cmd_eval(args) -> int:
    hyps_by_id = _read_hypotheses(args.hyp)
    refs = read_corpus(args.ref)
    missing = [u.uid for u in refs if u.uid not in hyps_by_id]
    if missing:
        raise ValueError(f"hypotheses missing for {len(missing)} ids "
                         f"(first: {missing[0]})")
    hyps = [hyps_by_id[u.uid] for u in refs]
    targets = [u.tgt_tokens for u in refs]
    print(f"bleu\t{bleu(hyps, targets, smooth=args.smooth):.4f}")
    print(f"token_accuracy\t{token_accuracy(hyps, targets):.6f}")
    if args.entities:
        ents = read_entities(args.entities)
        per_utt = [ents.get(u.uid, []) for u in refs]
        recall = entity_recall(hyps, targets, per_utt)
        print(f"entity_recall\t{'undefined' if recall is None else f'{recall:.6f}'}")
    return 0


def cmd_bench(args) -> int:
    run = load_run_config(args.config)
    spec = load_task_spec(run.task_spec) if run.task_spec else None
    utterances = read_corpus(args.input)
    modes = args.modes.split(",") if args.modes else list(ALL_BENCH_MODES)
    for mode in modes:
        if mode not in ALL_BENCH_MODES:
            raise ValueError(f"unknown bench mode {mode!r}")

    any_ran = False
    for mode in modes:
        path = os.path.join(args.checkpoints, f"{mode}.cgmm")
        if not os.path.exists(path):
            print(f"warning: missing checkpoint for mode {mode}: {path}",
                  file=sys.stderr)
            continue
        model = load_checkpoint(path)
        results = _decode_corpus(model, utterances, spec, run.model.beam_width)
        any_ran = True
        ratios, spans = [], []
        for _, _, stats, compressed, raw_frames in results:
            if compressed.source_frames:
                ratios.append(len(compressed) / compressed.source_frames)
            span = frame_span_ms(compressed, raw_frames, run.base_frame_ms)
            if span is not None:
                spans.append(span)
        total_calls = sum(s.joint_calls for _, _, s, _, _ in results)
        total_time = sum(s.wall_time for _, _, s, _, _ in results)
        mean_ratio = np.mean(ratios) if ratios else float("nan")
        mean_span = np.mean(spans) if spans else float("nan")
        print(f"{mode}\tml_ratio\t{mean_ratio:.6f}")
        print(f"{mode}\tframe_span_ms\t{mean_span:.4f}")
        print(f"{mode}\tjoint_calls\t{total_calls}")
        print(f"{mode}\twall_time\t{total_time:.4f}")
    if not any_ran:
        raise ValueError("no checkpoints found for any requested mode")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctcgmm",
        description="Streaming transducer translation with CTC-guided frame "
                    "merging and paired-text training.",
        epilog=f"config defaults:\n{config_field_docs()}\n"
               f"env: {SEED_ENV_VAR} overrides the configured seed",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="emit synthetic corpora")
    gen.add_argument("--spec", default="", help="task spec file (key=value)")
    gen.add_argument("--out-speech", required=True)
    gen.add_argument("--out-mt", required=True)
    gen.add_argument("--out-eval", default="")
    gen.add_argument("--out-entities", default="")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--n-speech", type=int, required=True)
    gen.add_argument("--n-mt", type=int, required=True)
    gen.add_argument("--n-eval", type=int, default=0)
    gen.add_argument("--eval-entity-rate", type=float, default=1.0)
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="train from a run config")
    tr.add_argument("--config", required=True)
    tr.set_defaults(func=cmd_train)

    dec = sub.add_parser("decode", help="beam-decode a corpus")
    dec.add_argument("--config", required=True)
    dec.add_argument("--checkpoint", required=True)
    dec.add_argument("--input", required=True)
    dec.add_argument("--output", required=True)
    dec.add_argument("--beam", type=int, default=0)
    dec.set_defaults(func=cmd_decode)

    ev = sub.add_parser("eval", help="score hypotheses against references")
    ev.add_argument("--hyp", required=True)
    ev.add_argument("--ref", required=True)
    ev.add_argument("--entities", default="")
    ev.add_argument("--smooth", action="store_true")
    ev.set_defaults(func=cmd_eval)

    be = sub.add_parser("bench", help="compare decoding cost across modes")
    be.add_argument("--config", required=True)
    be.add_argument("--checkpoints", required=True,
                    help="directory holding <mode>.cgmm files")
    be.add_argument("--input", required=True)
    be.add_argument("--modes", default="",
                    help=f"comma list from {','.join(ALL_BENCH_MODES)}")
    be.set_defaults(func=cmd_bench)

    spec = sub.add_parser("dump-spec", help="print task-spec defaults")
    spec.set_defaults(func=lambda a: print(dump_task_spec(SyntheticTaskSpec()),
                                           end="") or 0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
