"""Shared configuration: model shape, run hyperparameters, seed streams.

Every tunable lives in one of the two dataclasses below so that a run can
serialize its full configuration as a flat key=value file and reload it
byte-for-byte. Unknown keys are rejected on load rather than ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np


@dataclass
class ModelConfig:
    """Transformer shape. Defaults give the 793,344-parameter base model."""

    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_head: int = 32
    d_ff: int = 256
    vocab_size: int = 1024
    max_seq_len: int = 1024

    def validate(self) -> None:
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError(
                f"n_heads*d_head must equal d_model, got {self.n_heads}*{self.d_head} != {self.d_model}"
            )


@dataclass
class HyperParams:
    """Everything that is not model shape: cache, gate, scheduler, training."""

    # augmented cache / signature tagger
    signature_dim: int = 64          # width of semantic signatures
    pool_window: int = 4             # local key window pooled into each signature
    conflict_threshold: float = 0.85 # cosine above this marks the older entry superseded
    context_window: int = 16         # recent keys averaged into the gate context feature

    # forgetting gate
    gate_hidden_dim: int = 128
    keep_threshold: float = 0.7
    evict_threshold: float = 0.3
    bias_scale: float = 5.0          # multiplier on ln(retention) for the soft attention bias
    bias_floor: float = 1e-6         # retention is clamped here before the log
    gumbel_temp_start: float = 1.0
    gumbel_temp_end: float = 0.1

    # consolidation
    recency_weight: float = 2.0      # logit bonus per unit of normalized timestamp
    consolidation_eps: float = 1e-6  # denominator guard for the retention-weighted key mean

    # key decay
    decay_rate: float = 0.01         # exponent in (1 + age)^(-decay_rate)

    # sleep scheduler
    entropy_kappa: float = 1.5
    entropy_window: int = 64
    entropy_min_samples: int = 8
    max_conflict_density: float = 0.4
    sleep_interval_max: int = 128

    # losses
    sleep_loss_weight: float = 0.5
    compress_loss_weight: float = 0.1
    align_loss_weight: float = 0.3
    align_clamp: float = 1e-7

    # optimization
    learning_rate: float = 3e-4
    batch_size: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01

    # schedule
    epochs_stage0: int = 10
    epochs_stage1: int = 5
    epochs_stage2: int = 30
    baseline_epochs: int = 45
    episodes_per_epoch: int = 1000
    probe_episodes: int = 50
    max_depth: int = 30

    # numerics
    layernorm_eps: float = 1e-5

    def stage2_depth_cap(self, stage2_epoch: int) -> int:
        """Depth cap for a 1-based epoch index within Stage 2."""
        if stage2_epoch <= 8:
            return 5
        if stage2_epoch <= 16:
            return 10
        if stage2_epoch <= 23:
            return 15
        return 30

    def gate_feature_width(self, d_model: int) -> int:
        # key + value + age encoding + signature + flag + attention + context mean
        return 3 * d_model + self.signature_dim + 2 + d_model


def _coerce(raw: str, typ: type):
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is bool:
        if raw in ("true", "True", "1"):
            return True
        if raw in ("false", "False", "0"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return raw


def save_config(path: str | Path, model: ModelConfig, hp: HyperParams) -> None:
    """Write both configs as flat key=value lines, model keys prefixed."""
    lines = []
    for f in fields(model):
        lines.append(f"model.{f.name}={getattr(model, f.name)}")
    for f in fields(hp):
        lines.append(f"{f.name}={getattr(hp, f.name)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_config(path: str | Path) -> tuple[ModelConfig, HyperParams]:
    """Parse a flat key=value config. Unknown keys are an error."""
    model = ModelConfig()
    hp = HyperParams()
    model_fields = {f.name: f.type for f in fields(model)}
    hp_fields = {f.name: f.type for f in fields(hp)}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        try:
            if key.startswith("model."):
                name = key[len("model."):]
                if name not in model_fields:
                    raise KeyError(key)
                setattr(model, name, _coerce(raw, _FIELD_TYPES[("model", name)]))
            else:
                if key not in hp_fields:
                    raise KeyError(key)
                setattr(hp, key, _coerce(raw, _FIELD_TYPES[("hp", key)]))
        except KeyError:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}") from None
        except ValueError as e:
            raise ValueError(f"{path}:{lineno}: bad value for {key!r}: {e}") from None
    model.validate()
    return model, hp


# dataclass f.type may be a string under future annotations; resolve real types once
_FIELD_TYPES: dict[tuple[str, str], type] = {}
for _f in dataclasses.fields(ModelConfig):
    _FIELD_TYPES[("model", _f.name)] = type(getattr(ModelConfig(), _f.name))
for _f in dataclasses.fields(HyperParams):
    _FIELD_TYPES[("hp", _f.name)] = type(getattr(HyperParams(), _f.name))


# Named sub-streams so that data, init, and gumbel noise never share state.
_STREAM_IDS = {"data": 1, "init": 2, "gumbel": 3, "eval": 4, "theory": 5, "probe": 6}


def stream_rng(root_seed: int, stream: str, *indices: int) -> np.random.Generator:
    """Deterministic generator for a named sub-stream of the root seed."""
    sid = _STREAM_IDS[stream]
    return np.random.default_rng(np.random.SeedSequence([root_seed, sid, *indices]))
