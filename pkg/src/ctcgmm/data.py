"""Deterministic synthetic translation task and corpus I/O.

The task maps source tokens to 1-2 target tokens through a seed-derived
substitution table, with optional local reordering (adjacent-pair swaps) and
pseudo-label noise on the speech side.  "Entities" are rare source-token
bigrams whose translation is a dedicated target sequence rather than the
concatenation of the per-token substitutions, mirroring proper nouns built
from known word pieces: both constituent tokens occur acoustically in the
speech corpus, but the bigram itself (and so its translation) appears only
in the paired-text corpus.  Features are never stored: each utterance's
frames regenerate from its tokens, the task seed, and the utterance id.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .rng import Rng

# stream tags for seed splitting
_SUBST = 101
_PROTO = 202
_FEAT = 303
_ENTITY = 404


@dataclass
class SyntheticTaskSpec:
    """Parameters of the synthetic translation task; parses as key=value."""

    src_vocab_size: int = 20
    tgt_vocab_size: int = 16
    feature_dim: int = 8
    min_src_len: int = 3
    max_src_len: int = 12
    swap_prob: float = 0.1           # per adjacent target pair
    repeat_min: int = 4              # frames per source token, lower bound
    repeat_max: int = 6
    noise_std: float = 0.1
    num_entities: int = 0            # reserved source-token bigrams
    entity_target_len: int = 2       # dedicated target tokens per entity
    label_noise: float = 0.0         # speech-side pseudo-label corruption
    mt_entity_rate: float = 0.5      # chance an MT sentence carries an entity
    seed: int = 0

    def validate(self) -> None:
        if self.repeat_min < 2:
            raise ValueError("repeat_min must be >= 2")
        if self.repeat_max < self.repeat_min:
            raise ValueError("repeat_max must be >= repeat_min")
        if not 0 < self.min_src_len <= self.max_src_len:
            raise ValueError("bad source length bounds")
        if self.num_entities < 0:
            raise ValueError("num_entities must be >= 0")
        if self.num_entities and self.src_vocab_size < 4:
            raise ValueError("entity bigrams need a source vocab of >= 4")
        if self.num_entities > self.src_vocab_size:
            raise ValueError("too many entity bigrams for the source vocab")
        reserved = self.num_entities * self.entity_target_len
        if reserved >= self.tgt_vocab_size:
            raise ValueError("entity targets exceed target vocab")

    @property
    def ordinary_tokens(self) -> tuple[int, ...]:
        return tuple(range(self.src_vocab_size))

    @property
    def entity_pairs(self) -> tuple[tuple[int, int], ...]:
        """Reserved source bigrams, deterministic from the seed.

        Both tokens of a pair are ordinary vocabulary (their acoustics are
        learnable from speech), but the bigram itself is excluded from the
        speech corpus, so only paired text can teach its translation.
        """
        rng = Rng(self.seed).split(_ENTITY)
        pairs: list[tuple[int, int]] = []
        taken: set[tuple[int, int]] = set()
        while len(pairs) < self.num_entities:
            a = rng.randint(self.src_vocab_size)
            b = rng.randint(self.src_vocab_size)
            if a == b or (a, b) in taken:
                continue
            taken.add((a, b))
            pairs.append((a, b))
        return tuple(pairs)


@dataclass
class Utterance:
    """A (source, target) pair; features regenerate on demand."""

    uid: str
    src_tokens: list[int]
    tgt_tokens: list[int]
    features: np.ndarray | None = None
    entity_targets: list[list[int]] = field(default_factory=list)


def substitution_map(spec: SyntheticTaskSpec) -> dict[int, tuple[int, ...]]:
    """Total deterministic token-to-target mapping for ordinary translation.

    Targets come from the unreserved range; the top
    num_entities * entity_target_len target ids are dedicated to entity
    bigrams so an entity translation never occurs by accident.
    """
    spec.validate()
    rng = Rng(spec.seed).split(_SUBST)
    ordinary_pool = spec.tgt_vocab_size - spec.num_entities * spec.entity_target_len
    table: dict[int, tuple[int, ...]] = {}
    for tok in spec.ordinary_tokens:
        width = 1 + rng.randint(2)
        table[tok] = tuple(rng.randint(ordinary_pool) for _ in range(width))
    return table


def entity_map(spec: SyntheticTaskSpec) -> dict[tuple[int, int], tuple[int, ...]]:
    """Dedicated target sequence for each reserved source bigram."""
    base = spec.tgt_vocab_size - spec.num_entities * spec.entity_target_len
    return {pair: tuple(range(base + i * spec.entity_target_len,
                              base + (i + 1) * spec.entity_target_len))
            for i, pair in enumerate(spec.entity_pairs)}


def translate(src_tokens, table, entities=None,
              with_protection: bool = False):
    """Greedy bigram-first translation: reserved pairs take their dedicated
    targets, everything else goes token by token.  With protection, also
    returns a flag per target position marking entity translations."""
    entities = entities or {}
    out: list[int] = []
    protected: list[bool] = []
    i = 0
    while i < len(src_tokens):
        pair = tuple(src_tokens[i:i + 2])
        if len(pair) == 2 and pair in entities:
            out.extend(entities[pair])
            protected.extend([True] * len(entities[pair]))
            i += 2
        else:
            piece = table[src_tokens[i]]
            out.extend(piece)
            protected.extend([False] * len(piece))
            i += 1
    return (out, protected) if with_protection else out


def entity_occurrences(src_tokens, entities) -> list[tuple[int, int]]:
    """Reserved bigrams as the greedy translation scan consumes them."""
    out: list[tuple[int, int]] = []
    i = 0
    while i < len(src_tokens):
        pair = tuple(src_tokens[i:i + 2])
        if len(pair) == 2 and pair in entities:
            out.append(pair)
            i += 2
        else:
            i += 1
    return out


def contains_entity(src_tokens, spec: SyntheticTaskSpec) -> int:
    """Count reserved-bigram occurrences in a source sequence."""
    return len(entity_occurrences(src_tokens, entity_map(spec)))


def apply_swaps(tokens: list[int], rng: Rng, swap_prob: float,
                protected=None) -> list[int]:
    """Swap non-overlapping adjacent pairs, each with swap_prob.

    Positions flagged in ``protected`` never move (entity translations stay
    contiguous)."""
    out = list(tokens)
    i = 0
    while i + 1 < len(out):
        if protected is not None and (protected[i] or protected[i + 1]):
            i += 1
            continue
        if rng.uniform() < swap_prob:
            out[i], out[i + 1] = out[i + 1], out[i]
        i += 2
    return out


def _break_entity_bigrams(src: list[int], rng: Rng,
                          spec: SyntheticTaskSpec) -> list[int]:
    """Resample second tokens until no reserved bigram remains."""
    pairs = set(spec.entity_pairs)
    out = list(src)
    guard = 0
    while True:
        hits = [i for i in range(len(out) - 1) if (out[i], out[i + 1]) in pairs]
        if not hits:
            return out
        guard += 1
        if guard > 100:
            raise RuntimeError("could not break entity bigrams")
        for i in hits:
            out[i + 1] = rng.randint(spec.src_vocab_size)


def gen_pair(rng: Rng, spec: SyntheticTaskSpec, table=None,
             entity_rate: float = 0.0) -> tuple[list[int], list[int]]:
    """Sample one (source, target) pair; deterministic given rng state.

    With entity_rate = 0 the source is guaranteed free of reserved bigrams;
    otherwise one reserved bigram is planted with that probability.
    """
    if table is None:
        table = substitution_map(spec)
    entities = entity_map(spec)
    length = spec.min_src_len + rng.randint(spec.max_src_len - spec.min_src_len + 1)
    src = [rng.randint(spec.src_vocab_size) for _ in range(length)]
    if spec.num_entities:
        src = _break_entity_bigrams(src, rng, spec)
        if entity_rate > 0 and rng.uniform() < entity_rate:
            pair = spec.entity_pairs[rng.randint(spec.num_entities)]
            pos = rng.randint(max(length - 1, 1))
            src[pos:pos + 2] = list(pair)
    tgt, protected = translate(src, table, entities, with_protection=True)
    tgt = apply_swaps(tgt, rng, spec.swap_prob, protected)
    return src, tgt


def corrupt_labels(tokens: list[int], rng: Rng, noise: float,
                   pool_size: int) -> list[int]:
    """Pseudo-label noise: random token substitution at the given rate."""
    if noise <= 0:
        return list(tokens)
    return [rng.randint(pool_size) if rng.uniform() < noise else t for t in tokens]


def token_prototype(spec: SyntheticTaskSpec, token: int) -> np.ndarray:
    """Fixed per-token feature vector, deterministic from (seed, token)."""
    return Rng(spec.seed).split(_PROTO + token).normal(spec.feature_dim)


def synth_features(src_tokens, rng: Rng, spec: SyntheticTaskSpec) -> np.ndarray:
    """Each token's prototype repeated a random number of times plus noise."""
    for tok in src_tokens:
        if not 0 <= tok < spec.src_vocab_size:
            raise ValueError(f"token {tok} outside source vocab")
    blocks = []
    for tok in src_tokens:
        repeat = spec.repeat_min + rng.randint(spec.repeat_max - spec.repeat_min + 1)
        proto = token_prototype(spec, tok)
        block = np.tile(proto, (repeat, 1))
        if spec.noise_std > 0:
            block = block + rng.normal(repeat * spec.feature_dim,
                                       std=spec.noise_std).reshape(repeat, -1)
        blocks.append(block)
    return np.concatenate(blocks, axis=0)


def _fnv1a(text: str) -> int:
    """Stable 64-bit string hash (python's hash() is salted per process)."""
    acc = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        acc ^= byte
        acc = (acc * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return acc


def features_for(utt: Utterance, spec: SyntheticTaskSpec | None) -> np.ndarray:
    """Regenerate (and cache) an utterance's features from its id + seed."""
    if utt.features is None:
        if spec is None:
            raise ValueError(f"utterance {utt.uid} has no features and no "
                             f"task spec to regenerate them")
        rng = Rng(spec.seed ^ _fnv1a(utt.uid)).split(_FEAT)
        utt.features = synth_features(utt.src_tokens, rng, spec)
    return utt.features


# -- corpus generation --------------------------------------------------------


def gen_speech_corpus(spec: SyntheticTaskSpec, n: int, rng: Rng,
                      prefix: str = "s") -> list[Utterance]:
    """Entity-free speech corpus with pseudo-label noise on targets."""
    table = substitution_map(spec)
    out = []
    for i in range(n):
        src, tgt = gen_pair(rng, spec, table, entity_rate=0.0)
        tgt = corrupt_labels(tgt, rng, spec.label_noise,
                             spec.tgt_vocab_size
                             - spec.num_entities * spec.entity_target_len)
        out.append(Utterance(f"{prefix}{i:05d}", src, tgt))
    return out


def gen_mt_corpus(spec: SyntheticTaskSpec, n: int, rng: Rng,
                  prefix: str = "m") -> list[Utterance]:
    """Noise-free paired text; entities appear at mt_entity_rate."""
    table = substitution_map(spec)
    return [Utterance(f"{prefix}{i:05d}",
                      *gen_pair(rng, spec, table, entity_rate=spec.mt_entity_rate))
            for i in range(n)]


def gen_eval_corpus(spec: SyntheticTaskSpec, n: int, rng: Rng,
                    entity_rate: float = 1.0,
                    prefix: str = "e") -> list[Utterance]:
    """Held-out speech with clean references; entity occurrences recorded."""
    table = substitution_map(spec)
    entities = entity_map(spec)
    out = []
    for i in range(n):
        src, tgt = gen_pair(rng, spec, table, entity_rate=entity_rate)
        utt = Utterance(f"{prefix}{i:05d}", src, tgt)
        utt.entity_targets = [list(entities[pair])
                              for pair in entity_occurrences(src, entities)]
        out.append(utt)
    return out


# -- file formats --------------------------------------------------------------


def write_corpus(path: str, utterances: list[Utterance]) -> None:
    """One line per utterance: id<TAB>src ids<TAB>tgt ids."""
    with open(path, "w", encoding="utf-8") as fh:
        for utt in utterances:
            src = " ".join(str(t) for t in utt.src_tokens)
            tgt = " ".join(str(t) for t in utt.tgt_tokens)
            fh.write(f"{utt.uid}\t{src}\t{tgt}\n")


def read_corpus(path: str) -> list[Utterance]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not parts[0]:
                raise ValueError(f"{path}:{lineno}: expected id<TAB>src<TAB>tgt")
            uid, src_text, tgt_text = parts
            if not src_text.strip() or not tgt_text.strip():
                raise ValueError(f"{path}:{lineno}: empty token field")
            try:
                src = [int(t) for t in src_text.split()]
                tgt = [int(t) for t in tgt_text.split()]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad token id: {exc}") from None
            out.append(Utterance(uid, src, tgt))
    return out


def write_entities(path: str, utterances: list[Utterance]) -> None:
    """Sidecar: id<TAB>entity tgt ids, one required entity per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for utt in utterances:
            for seq in utt.entity_targets:
                fh.write(f"{utt.uid}\t{' '.join(str(t) for t in seq)}\n")


def read_entities(path: str) -> dict[str, list[list[int]]]:
    out: dict[str, list[list[int]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1].strip():
                raise ValueError(f"{path}:{lineno}: expected id<TAB>tgt ids")
            out.setdefault(parts[0], []).append([int(t) for t in parts[1].split()])
    return out


def load_task_spec(path: str) -> SyntheticTaskSpec:
    """Parse a task-spec file in the same key=value format as configs."""
    from .config import _parse_lines, apply_pairs

    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    spec = SyntheticTaskSpec()
    known = {f.name: (spec, type(getattr(spec, f.name)))
             for f in fields(SyntheticTaskSpec)}
    apply_pairs(spec, _parse_lines(text, path), known, path)
    spec.validate()
    return spec


def dump_task_spec(spec: SyntheticTaskSpec) -> str:
    return "\n".join(f"{f.name}={getattr(spec, f.name)}"
                     for f in fields(SyntheticTaskSpec)) + "\n"
