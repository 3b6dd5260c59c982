"""Full-system parameter bundle and the training-time gating pass.

The system is the base transformer plus three small add-ons: the signature
tagger, the retention gate, and the consolidation projections. Parameters
live in one flat name->Tensor dict; the name's first dotted segment is the
component, which is what the accounting reports count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import cache as cache_mod
from . import gate as gate_mod
from .autograd import Tensor
from .config import ModelConfig, stream_rng
from .consolidation import init_consolidation_params
from .model import ForwardResult, count_params, init_model_params

COMPONENTS = ("model", "tagger", "gate", "consol")


def init_system_params(cfg: ModelConfig, root_seed: int,
                       include_action_head: bool = False) -> dict[str, Tensor]:
    """All components, each initialized from its own named seed stream."""
    params: dict[str, Tensor] = {}
    params.update(init_model_params(cfg, stream_rng(root_seed, "init", 0)))
    params.update(cache_mod.init_tagger_params(stream_rng(root_seed, "init", 1), cfg.d_model))
    params.update(gate_mod.init_gate_params(stream_rng(root_seed, "init", 2),
                                            include_action_head=include_action_head))
    params.update(init_consolidation_params(stream_rng(root_seed, "init", 3), cfg.d_model))
    return params


def component_counts(params: dict[str, Tensor]) -> dict[str, int]:
    total, by_component = count_params(params)
    by_component["total"] = total
    return by_component


def sleep_overhead(params: dict[str, Tensor]) -> float:
    """Added parameters (tagger+gate+consolidation) relative to the base model."""
    counts = component_counts(params)
    extra = sum(counts.get(c, 0) for c in ("tagger", "gate", "consol"))
    return extra / counts["model"]


def select(params: dict[str, Tensor], *components: str) -> dict[str, Tensor]:
    picked = {k: v for k, v in params.items() if k.split(".")[0] in components}
    if not picked:
        raise KeyError(f"no parameters under {components}")
    return picked


def flat_keys(keys_heads: Tensor, b: int, t: int, d: int) -> Tensor:
    """Undo the head split: (B, H, T, d_head) -> (B, T, d_model) concatenated."""
    return ag.reshape(ag.swapaxes(keys_heads, 1, 2), (b, t, d))


@dataclass
class GatePass:
    retention: Tensor        # (B, T)
    bias: Tensor             # (B, T) additive attention bias per key position
    sigs: Tensor             # (B, T, 64)
    sigma: np.ndarray        # (B, T) bool, tagger supersession flags
    cum_attn: np.ndarray     # (B, T)


def gate_features(params: dict[str, Tensor], cfg: ModelConfig, fr: ForwardResult,
                  lengths: np.ndarray,
                  conflict_threshold: float = cache_mod.CONFLICT_THRESHOLD,
                  ) -> tuple[Tensor, Tensor, np.ndarray, np.ndarray]:
    """Assemble gate features for a teacher-forced batch.

    Metadata is taken at the designated layer (0) of an unbiased forward
    pass; features are assembled at each row's final real step. Signatures,
    keys, values, and the context summary carry gradients; ages, flags, and
    attention tallies enter as constants. Returns (features, signatures,
    flags, attention tallies).
    """
    k_heads, v_heads = fr.kv[0]
    b, _, t, _ = k_heads.data.shape
    kflat = flat_keys(k_heads, b, t, cfg.d_model)
    vflat = flat_keys(v_heads, b, t, cfg.d_model)

    sigs = cache_mod.signatures(select(params, "tagger"), kflat)
    sigma = cache_mod.conflict_flags(sigs.data, lengths, conflict_threshold)
    cum = cache_mod.cum_attention(fr.attn[0].data, lengths)

    final_step = (np.asarray(lengths) - 1)[:, None]
    ages = np.maximum(final_step - np.arange(t)[None, :], 0)

    feats = gate_mod.assemble_features(kflat, vflat, sigs, ages, sigma, cum, lengths)
    return feats, sigs, sigma, cum


def run_gate_pass(params: dict[str, Tensor], cfg: ModelConfig, fr: ForwardResult,
                  lengths: np.ndarray,
                  conflict_threshold: float = cache_mod.CONFLICT_THRESHOLD,
                  beta: float = gate_mod.BIAS_SCALE) -> GatePass:
    """Score every position of a teacher-forced batch with the gate."""
    feats, sigs, sigma, cum = gate_features(params, cfg, fr, lengths, conflict_threshold)
    r = gate_mod.retention(select(params, "gate"), feats)
    bias = gate_mod.soft_bias(r, beta)
    return GatePass(retention=r, bias=bias, sigs=sigs, sigma=sigma, cum_attn=cum)
