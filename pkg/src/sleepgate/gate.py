"""The forgetting gate: per-entry retention scores and attention biases.

Each cache entry is scored by a 2-layer MLP over a 578-wide feature vector
(key, value, sinusoidal age encoding, signature, superseded flag, squashed
cumulative attention, and a mean-pooled context summary). The score maps to
a discrete action through fixed thresholds, or to a soft additive attention
bias beta*ln(r) that suppresses low-retention entries without deleting them.

Gumbel relaxations for the hard-eviction variant live here too; the default
training path never samples them (retention is used deterministically).
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import position_table

FEATURE_WIDTH = 578          # 128 k + 128 v + 128 age + 64 sig + 1 flag + 1 attn + 128 ctx
GATE_HIDDEN = 128
KEEP_THRESHOLD = 0.7
EVICT_THRESHOLD = 0.3
BIAS_SCALE = 5.0
BIAS_FLOOR = 1e-6
CONTEXT_WINDOW = 16


class Action(IntEnum):
    KEEP = 0
    COMPRESS = 1
    EVICT = 2


def init_gate_params(rng: np.random.Generator, include_action_head: bool = False,
                     feature_width: int = FEATURE_WIDTH,
                     hidden: int = GATE_HIDDEN) -> dict[str, Tensor]:
    p = {
        "gate.w1": Tensor(rng.normal(0.0, 0.02, (feature_width, hidden)).astype(np.float32),
                          requires_grad=True),
        "gate.b1": Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True),
        "gate.w_r": Tensor(rng.normal(0.0, 0.02, (hidden, 1)).astype(np.float32),
                           requires_grad=True),
        "gate.b_r": Tensor(np.zeros(1, dtype=np.float32), requires_grad=True),
    }
    if include_action_head:
        # three-way logits for the hard variant; kept out of the default
        # parameter set so component counts stay at the published figures
        p["action.w"] = Tensor(rng.normal(0.0, 0.02, (hidden, 3)).astype(np.float32),
                               requires_grad=True)
        p["action.b"] = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    return p


def assemble_features(keys: Tensor, values: Tensor, sigs: Tensor,
                      ages: np.ndarray, sigma: np.ndarray, cum_attn: np.ndarray,
                      lengths: np.ndarray | None = None,
                      context_window: int = CONTEXT_WINDOW) -> Tensor:
    """Per-entry gate features, (B, T, 578).

    keys/values/sigs carry gradients; ages, flags, and attention tallies are
    constants. The context summary is the mean of the most recent
    min(16, available) keys of each row, shared across that row's entries.
    """
    b, t, d = keys.data.shape
    if lengths is None:
        lengths = np.full(b, t, dtype=np.int64)
    ages = np.asarray(ages)
    if np.any(ages < 0):
        raise ValueError("entry ages must be non-negative")

    pe_age = Tensor(position_table(1024, d)[ages])

    ctx_weights = np.zeros((b, 1, t), dtype=np.float32)
    for i, ln in enumerate(np.asarray(lengths)):
        lo = max(0, int(ln) - context_window)
        ctx_weights[i, 0, lo:int(ln)] = 1.0 / (int(ln) - lo)
    ctx = ag.expand(ag.matmul(Tensor(ctx_weights), keys), axis=1, n=t)

    sig_col = Tensor(sigma.astype(np.float32)[..., None])
    a = np.asarray(cum_attn, dtype=np.float32)
    attn_col = Tensor((a / (1.0 + a))[..., None])

    out = ag.concat([keys, values, pe_age, sigs, sig_col, attn_col, ctx], axis=-1)
    if out.data.shape[-1] != FEATURE_WIDTH:
        raise ValueError(f"feature width {out.data.shape[-1]} != {FEATURE_WIDTH}")
    return out


def retention(gate: dict[str, Tensor], features: Tensor) -> Tensor:
    """Retention scores in (0, 1); shape = features minus the last axis."""
    if not np.all(np.isfinite(features.data)):
        raise ValueError("gate features must be finite")
    h = ag.gelu(ag.add(ag.matmul(features, gate["gate.w1"]), gate["gate.b1"]))
    r = ag.sigmoid(ag.add(ag.matmul(h, gate["gate.w_r"]), gate["gate.b_r"]))
    shape = features.data.shape[:-1]
    return ag.reshape(r, shape)


def act(r: np.ndarray, keep: float = KEEP_THRESHOLD,
        evict: float = EVICT_THRESHOLD) -> np.ndarray:
    """Threshold retention scores into actions; boundaries close downward."""
    r = np.asarray(r)
    out = np.full(r.shape, Action.COMPRESS, dtype=np.int64)
    out[r >= keep] = Action.KEEP
    out[r < evict] = Action.EVICT
    return out


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float32).tiny, 1.0, shape)
    return (-np.log(-np.log(u))).astype(np.float32)


def gumbel_relax3(logits: Tensor, temperature: float, rng: np.random.Generator,
                  noise: np.ndarray | None = None) -> Tensor:
    """Differentiable 3-way relaxation: softmax((z + g) / temp) on the last axis."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if noise is None:
        noise = gumbel_noise(rng, logits.data.shape)
    return ag.softmax(ag.scale(ag.add(logits, Tensor(noise)), 1.0 / temperature))


def gumbel_relax_binary(logit: Tensor, temperature: float, rng: np.random.Generator,
                        noise: np.ndarray | None = None) -> Tensor:
    """Binary relaxation: sigmoid((l + g) / temp)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if noise is None:
        noise = gumbel_noise(rng, logit.data.shape)
    return ag.sigmoid(ag.scale(ag.add(logit, Tensor(noise)), 1.0 / temperature))


def action_logits(gate: dict[str, Tensor], features: Tensor) -> Tensor:
    """Three-way action logits (hard variant); requires the action head."""
    if "action.w" not in gate:
        raise KeyError("gate was initialized without the action head")
    h = ag.gelu(ag.add(ag.matmul(features, gate["gate.w1"]), gate["gate.b1"]))
    return ag.add(ag.matmul(h, gate["action.w"]), gate["action.b"])


def soft_bias(r: Tensor, beta: float = BIAS_SCALE, eps: float = BIAS_FLOOR) -> Tensor:
    """b = beta * ln(max(r, eps)) <= 0; gradient beta/r wherever r > eps."""
    return ag.scale(ag.log(ag.clamp_min(r, eps)), beta)


def anneal_temperature(epoch: int, total_epochs: int, start: float = 1.0,
                       end: float = 0.1) -> float:
    """Linear per-epoch schedule from start (epoch 1) to end (final epoch)."""
    if total_epochs <= 1:
        return end
    frac = (epoch - 1) / (total_epochs - 1)
    return float(start + (end - start) * min(max(frac, 0.0), 1.0))
