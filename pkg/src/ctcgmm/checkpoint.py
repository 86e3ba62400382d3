"""Binary checkpoint: magic "CGMM", version, embedded config, named tensors.

Layout (all integers little-endian uint32): magic bytes, format version,
config byte length + key=value config text, parameter count, then for each
parameter: name length, name, rank, dims, float32 little-endian values.
Weights persist in float32; the engine computes in float64.
"""

from __future__ import annotations

import struct

import numpy as np

from .config import ModelConfig, dump_model_config, load_model_config
from .model import CtcGmmModel

MAGIC = b"CGMM"
VERSION = 1


def save_checkpoint(model: CtcGmmModel, path: str) -> None:
    config_bytes = dump_model_config(model.config).encode("utf-8")
    params = model.named_params()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name, tensor in params:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            dims = tensor.data.shape
            fh.write(struct.pack("<I", len(dims)))
            for d in dims:
                fh.write(struct.pack("<I", d))
            fh.write(tensor.data.astype("<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def load_checkpoint(path: str) -> CtcGmmModel:
    """Rebuild the model from an embedded config and stored weights."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise ValueError(f"{path}: not a CGMM checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4))
        config = load_model_config(_read_exact(fh, config_len).decode("utf-8"), path)
        model = CtcGmmModel(config)
        expected = dict(model.named_params())
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        if count != len(expected):
            raise ValueError(f"{path}: parameter count mismatch "
                             f"({count} stored, {len(expected)} expected)")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            if name not in expected:
                raise ValueError(f"{path}: unexpected parameter {name!r}")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            tensor = expected[name]
            if tuple(dims) != tensor.data.shape:
                raise ValueError(f"{path}: dimension mismatch for {name}: "
                                 f"stored {tuple(dims)}, model {tensor.data.shape}")
            n_vals = int(np.prod(dims)) if dims else 1
            raw = _read_exact(fh, 4 * n_vals)
            tensor.data = np.frombuffer(raw, dtype="<f4").astype(np.float64) \
                .reshape(dims)
    return model


def check_config_compatible(run_cfg: ModelConfig, ckpt_cfg: ModelConfig) -> None:
    """Dimension-bearing fields must agree between a run config and a
    checkpoint; raises naming the first mismatched field."""
    dim_fields = ("feature_dim", "encoder_dim", "speech_encoder_layers",
                  "shared_encoder_layers", "time_reduction", "merge_mode",
                  "src_vocab", "tgt_vocab", "joint_dim", "pred_embed_dim",
                  "pred_hidden_dim", "pred_layers", "ffn_mult",
                  "share_discrete_embedding")
    for name in dim_fields:
        if getattr(run_cfg, name) != getattr(ckpt_cfg, name):
            raise ValueError(
                f"checkpoint/config mismatch on field {name!r}: "
                f"config {getattr(run_cfg, name)!r}, "
                f"checkpoint {getattr(ckpt_cfg, name)!r}")
