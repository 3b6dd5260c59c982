"""Adaptive sleep-cycle triggering and cycle orchestration.

A cycle fires when the current step's attention entropy rises above a
running mean by 1.5 standard deviations (computed over a sliding window of
recent measurements, guarded until 8 samples exist), when the fraction of
superseded cache entries exceeds 0.4, or unconditionally every 128 steps.

A soft cycle leaves the cache intact and returns per-entry attention biases.
A hard cycle decays the attention-visible keys by age, scores every entry,
consolidates Compress clusters, drops Evict entries, and recomputes derived
metadata.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import cache as cache_mod
from . import consolidation as consol_mod
from . import gate as gate_mod
from .autograd import Tensor, no_grad

ENTROPY_KAPPA = 1.5
ENTROPY_WINDOW = 64
ENTROPY_MIN_SAMPLES = 8
MAX_CONFLICT_DENSITY = 0.4
SLEEP_INTERVAL_MAX = 128


def attention_entropy(head_weights: np.ndarray) -> float:
    """Mean over heads of the natural-log entropy of each head's distribution.

    head_weights: (H, m) rows summing to 1; zero cells contribute zero.
    """
    w = np.asarray(head_weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[None]
    logw = np.where(w > 0, np.log(np.where(w > 0, w, 1.0)), 0.0)
    return float(-(w * logw).sum(axis=-1).mean())


def conflict_density(sigma: np.ndarray) -> float:
    sigma = np.asarray(sigma)
    return float(sigma.mean()) if sigma.size else 0.0


@dataclass
class TriggerState:
    kappa: float = ENTROPY_KAPPA
    rho_max: float = MAX_CONFLICT_DENSITY
    n_max: int = SLEEP_INTERVAL_MAX
    min_samples: int = ENTROPY_MIN_SAMPLES
    window: deque = field(default_factory=lambda: deque(maxlen=ENTROPY_WINDOW))
    last_trigger: int = 0

    def entropy_stats(self) -> tuple[float, float, int]:
        n = len(self.window)
        if n == 0:
            return 0.0, 0.0, 0
        arr = np.fromiter(self.window, dtype=np.float64)
        return float(arr.mean()), float(arr.std()), n

    def should_trigger(self, h_t: float, rho_t: float, step: int) -> bool:
        """step is 1-based (tokens processed so far). Does not mutate state."""
        mean, std, n = self.entropy_stats()
        entropy_spike = n >= self.min_samples and h_t > mean + self.kappa * std
        return bool(entropy_spike or rho_t > self.rho_max or step % self.n_max == 0)

    def step(self, h_t: float, rho_t: float, step: int) -> bool:
        """Decide from the pre-existing window, then record this measurement."""
        fired = self.should_trigger(h_t, rho_t, step)
        self.window.append(h_t)
        if fired:
            self.last_trigger = step
        return fired


def gate_cache_entries(cache: cache_mod.AugmentedCache, gate: dict[str, Tensor],
                       step: int) -> np.ndarray:
    """Retention scores for every current entry, no gradients.

    Features use the original (undecayed) keys; the context summary pools the
    most recent entries in the cache itself.
    """
    m = len(cache)
    if m == 0:
        return np.zeros(0, dtype=np.float32)
    ages = cache.ages(step)
    if np.any(ages < 0):
        raise ValueError("cycle step precedes cached positions")
    with no_grad():
        feats = gate_mod.assemble_features(
            Tensor(cache.keys[None]), Tensor(cache.values[None]),
            Tensor(cache.sigs[None]), ages[None], cache.sigma[None],
            cache.cum_attn[None])
        r = gate_mod.retention(gate, feats)
    return r.data[0].astype(np.float32)


def run_sleep_cycle(cache: cache_mod.AugmentedCache, gate: dict[str, Tensor],
                    tagger: dict[str, Tensor], consol: dict[str, Tensor],
                    mode: str, step: int,
                    beta: float = gate_mod.BIAS_SCALE,
                    decay_rate: float = cache_mod.DECAY_RATE):
    """Run one sleep micro-cycle at `step`.

    mode "soft": returns per-entry attention biases beta*ln(max(r, eps)).
    mode "hard": returns (retentions, decayed-visible keys of survivors,
    TransformResult) and installs the transformed entries into the cache.
    """
    if mode not in ("soft", "hard"):
        raise ValueError(f"unknown sleep mode {mode!r}")
    cache.refresh(tagger)
    r = gate_cache_entries(cache, gate, step)
    if mode == "soft":
        return beta * np.log(np.maximum(r, gate_mod.BIAS_FLOOR))

    visible = cache.decayed_keys(step, decay_rate)
    actions = gate_mod.act(r)
    result = consol_mod.hard_sleep_transform(
        cache.keys, cache.values, cache.tau, cache.sigma, cache.cum_attn,
        cache.sigs, actions, r, consol, tagger)
    survivor_visible = []
    old_tau = {int(t): i for i, t in enumerate(cache.tau)}
    factors = cache_mod.decay_factors(step - result.tau, decay_rate)
    for i, t in enumerate(result.tau):
        j = old_tau.get(int(t))
        if j is not None and int(t) not in result.consolidated_tau:
            survivor_visible.append(visible[j])
        else:
            survivor_visible.append(result.keys[i] * factors[i])
    visible_keys = (np.stack(survivor_visible).astype(np.float32)
                    if survivor_visible else np.zeros_like(result.keys))
    cache.replace(result.keys, result.values, result.tau, result.sigma, result.cum_attn)
    cache.sigs = result.sigs
    return r, visible_keys, result
