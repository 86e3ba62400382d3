"""Model and run configuration with a plain-text key=value format.

Every field has a default; unknown keys are rejected so typos fail loudly.
``CTCGMM_SEED`` in the environment overrides the configured seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

from .compress import MergeMode

SEED_ENV_VAR = "CTCGMM_SEED"


@dataclass
class ModelConfig:
    """Network shape and training hyperparameters.

    Desk-scale preset: a 2-layer causal speech encoder feeding a CTC branch
    and frame merge, a 2-layer shared encoder over merged frames or text
    embeddings, and a 1-layer LSTM predictor.  The "big shared encoder"
    variant raises shared_encoder_layers.
    """

    feature_dim: int = 8             # raw per-frame feature size
    encoder_dim: int = 64            # width of both encoders (D)
    speech_encoder_layers: int = 2
    shared_encoder_layers: int = 2
    time_reduction: int = 4          # frame-stacking stride (4 or 8)
    merge_mode: str = "average"      # none|average|attention|discrete_keep_blank|discrete_remove_blank
    top_n: int = 5                   # sampling pool for training-time prediction
    src_vocab: int = 20              # source tokens (blank is the extra last id)
    tgt_vocab: int = 16              # target tokens (blank is the extra last id)
    ctc_weight: float = 0.1
    use_mt_text: bool = True
    beam_width: int = 4
    joint_dim: int = 64
    pred_embed_dim: int = 32
    pred_hidden_dim: int = 64
    pred_layers: int = 1
    ffn_mult: int = 2
    share_discrete_embedding: bool = True   # discrete merge reuses the text table
    learning_rate: float = 2e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    warmup_steps: int = 100
    grad_clip: float = 5.0
    seed: int = 0

    def validate(self) -> None:
        if self.ctc_weight <= 0:
            raise ValueError("ctc_weight must be positive")
        if self.time_reduction not in (4, 8):
            raise ValueError("time_reduction must be 4 or 8")
        for name in ("speech_encoder_layers", "shared_encoder_layers", "pred_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        MergeMode(self.merge_mode)  # raises on unknown mode
        if not 1 <= self.top_n <= self.src_vocab + 1:
            raise ValueError("top_n must be in [1, src_vocab + 1]")

    @property
    def merge(self) -> MergeMode:
        return MergeMode(self.merge_mode)


@dataclass
class RunConfig:
    """Experiment-level settings wrapped around a ModelConfig."""

    model: ModelConfig = field(default_factory=ModelConfig)
    experiment: str = "default"
    task_spec: str = ""              # SyntheticTaskSpec file for feature regen
    speech_corpus: str = ""
    mt_corpus: str = ""
    steps: int = 1000
    batch_size: int = 8
    checkpoint_path: str = "model.cgmm"
    metric_log_path: str = "metrics.tsv"
    checkpoint_every: int = 500
    log_every: int = 50
    base_frame_ms: float = 10.0


_RUN_SCALAR_FIELDS = [f for f in fields(RunConfig) if f.name != "model"]


def _convert(raw: str, target_type) -> object:
    if target_type is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return target_type(raw)


def _parse_lines(text: str, path: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def apply_pairs(obj, pairs: dict[str, str], known: dict[str, object], path: str) -> None:
    for key, raw in pairs.items():
        if key not in known:
            raise ValueError(f"{path}: unknown key {key!r}")
        holder, ftype = known[key]
        setattr(holder, key, _convert(raw, ftype))


def load_model_config(text: str, path: str = "<config>") -> ModelConfig:
    cfg = ModelConfig()
    known = {f.name: (cfg, type(getattr(cfg, f.name))) for f in fields(ModelConfig)}
    apply_pairs(cfg, _parse_lines(text, path), known, path)
    cfg.validate()
    return cfg


def load_run_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    run = RunConfig()
    known: dict[str, object] = {}
    for f in fields(ModelConfig):
        known[f.name] = (run.model, type(getattr(run.model, f.name)))
    for f in _RUN_SCALAR_FIELDS:
        known[f.name] = (run, type(getattr(run, f.name)))
    apply_pairs(run, _parse_lines(text, path), known, path)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        run.model.seed = int(env_seed)
    run.model.validate()
    return run


def dump_model_config(cfg: ModelConfig) -> str:
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in fields(ModelConfig)]
    return "\n".join(lines) + "\n"


def config_field_docs() -> str:
    """Human-readable default listing for --help and the README."""
    out = ["model fields:"]
    m = ModelConfig()
    for f in fields(ModelConfig):
        out.append(f"  {f.name} = {getattr(m, f.name)}")
    out.append("run fields:")
    r = RunConfig()
    for f in _RUN_SCALAR_FIELDS:
        out.append(f"  {f.name} = {getattr(r, f.name)}")
    return "\n".join(out)
