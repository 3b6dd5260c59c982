"""Token-by-token inference: the literal decode loop behind the batched passes.

Three modes share one decoder. Plain mode replays the transformer
incrementally and must match the batched teacher-forced forward up to float
reassociation. Policy mode physically gathers each step's retained cache
rows, which is the ground truth the masked batched attention is checked
against. Sleep mode maintains the augmented metadata cache, measures the
trigger signals after every token, and runs soft (re-attention bias) or
hard (consolidate/evict) cycles when the scheduler fires.

The soft bias is transient: it applies to the re-run of the triggering
step's attention and is not carried into later steps, matching the batched
convention where biased logits come from a dedicated second pass. A hard
cycle instead rewrites the per-layer caches in place: evicted positions
vanish everywhere, each compressed cluster collapses to one row per layer
(the learned consolidation maps act at the metadata layer; other layers mix
their own rows with the shared weights), and surviving attention keys carry
the cycle-time age decay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import baselines as base_mod
from . import cache as cache_mod
from . import consolidation as consol_mod
from . import gate as gate_mod
from . import scheduler as sched_mod
from .autograd import Tensor
from .config import ModelConfig
from .model import position_table

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))


def _gelu(x: np.ndarray) -> np.ndarray:
    return (x * (0.5 * (1.0 + erf(x * _INV_SQRT2)))).astype(x.dtype, copy=False)


def _layernorm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return (xc / np.sqrt(var + eps)) * gain + shift


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class TriggerEvent:
    step: int               # 1-based token count at which the cycle fired
    entropy: float
    density: float
    reason: str             # "entropy" / "density" / "periodic", "+"-joined
    mode: str               # "soft" or "hard"
    entries_before: int
    entries_after: int
    forced: bool = False    # query-time cycle requested by the caller


class StreamDecoder:
    """Incremental single-sequence decoder over a parameter dict.

    params may hold Tensors or plain arrays; cfg fixes the architecture.
    policy: baseline cache policy applied by physical row gathering.
    sleep: None, "soft", or "hard"; mutually exclusive with policy.
    """

    def __init__(self, params: dict, cfg: ModelConfig, *,
                 policy=None, sleep: str | None = None,
                 beta: float = gate_mod.BIAS_SCALE,
                 decay_rate: float = cache_mod.DECAY_RATE,
                 layernorm_eps: float = 1e-5):
        if sleep not in (None, "soft", "hard"):
            raise ValueError(f"unknown sleep mode {sleep!r}")
        if policy is not None and sleep is not None:
            raise ValueError("cache policy and sleep cycles are mutually exclusive")
        self.w = {k: np.asarray(getattr(v, "data", v), dtype=np.float32)
                  for k, v in params.items()}
        self.cfg = cfg
        self.policy = policy
        self.sleep = sleep
        self.beta = beta
        self.decay_rate = decay_rate
        self.eps = layernorm_eps
        self.pos = 0
        self.keys: list[list[np.ndarray]] = [[] for _ in range(cfg.n_layers)]
        self.vals: list[list[np.ndarray]] = [[] for _ in range(cfg.n_layers)]
        self.last_unbiased: np.ndarray | None = None
        self.events: list[TriggerEvent] = []
        if sleep is not None:
            self.meta = cache_mod.AugmentedCache(cfg.d_model)
            self.trigger = sched_mod.TriggerState()
            self._tensors = {k: Tensor(v) for k, v in self.w.items()}
        if isinstance(policy, base_mod.HeavyHitter):
            self.tally = np.zeros(0, dtype=np.float64)

    # -- one pass of the layer stack for the current position ----------------

    def _heads(self, flat: np.ndarray) -> np.ndarray:
        return flat.reshape(self.cfg.n_heads, self.cfg.d_head)

    def _process(self, x: np.ndarray, *, vis: np.ndarray | None,
                 mult: np.ndarray | None, bias: np.ndarray | None,
                 append: bool) -> tuple[np.ndarray, np.ndarray]:
        """Run the stack at one position. Returns (logits, layer-0 probs).

        vis: visible row indices (None = all); mult/bias: per visible row
        score modifiers; append: compute and store this position's K/V rows
        (False re-runs against the stored rows, the biased-pass convention).
        """
        cfg, w = self.cfg, self.w
        scale = 1.0 / np.float32(np.sqrt(cfg.d_head))
        probs0 = None
        for i in range(cfg.n_layers):
            pre = f"model.layers.{i}"
            h1 = _layernorm(x, w[f"{pre}.ln1.gain"], w[f"{pre}.ln1.shift"], self.eps)
            q = self._heads(h1 @ w[f"{pre}.attn.wq"] + w[f"{pre}.attn.bq"])
            if append:
                self.keys[i].append(self._heads(h1 @ w[f"{pre}.attn.wk"] + w[f"{pre}.attn.bk"]))
                self.vals[i].append(self._heads(h1 @ w[f"{pre}.attn.wv"] + w[f"{pre}.attn.bv"]))
            k_rows = np.stack(self.keys[i])
            v_rows = np.stack(self.vals[i])
            if vis is not None:
                k_rows = k_rows[vis]
                v_rows = v_rows[vis]
            scores = np.einsum("hd,mhd->hm", q, k_rows) * scale
            if mult is not None:
                scores = scores * mult[None, :]
            if bias is not None:
                scores = scores + bias[None, :]
            probs = _softmax(scores)
            if i == 0:
                probs0 = probs
            ctx = np.einsum("hm,mhd->hd", probs, v_rows).reshape(cfg.d_model)
            x = x + (ctx @ w[f"{pre}.attn.wo"] + w[f"{pre}.attn.bo"])
            h2 = _layernorm(x, w[f"{pre}.ln2.gain"], w[f"{pre}.ln2.shift"], self.eps)
            up = _gelu(h2 @ w[f"{pre}.ff.w_up"] + w[f"{pre}.ff.b_up"])
            x = x + (up @ w[f"{pre}.ff.w_down"] + w[f"{pre}.ff.b_down"])
        xf = _layernorm(x, w["model.final_ln.gain"], w["model.final_ln.shift"], self.eps)
        logits = xf @ w["model.lm_head.w"] + w["model.lm_head.b"]
        return logits, probs0

    # -- policy visibility ----------------------------------------------------

    def _visibility(self) -> tuple[np.ndarray | None, np.ndarray | None]:
        p = self.pos
        if self.policy is None:
            return None, None
        if isinstance(self.policy, base_mod.HeavyHitter):
            self.tally = np.append(self.tally, 0.0)
            vis = np.array(sorted(base_mod.h2o_retained(
                p, self.tally, self.policy.heavy, self.policy.recent)), dtype=np.int64)
            return vis, None
        if isinstance(self.policy, base_mod.DecayOnly):
            ages = p - np.arange(p + 1)
            return None, np.power(1.0 + ages, -self.policy.decay_rate).astype(np.float32)
        vis = np.array(sorted(self.policy.retained(p)), dtype=np.int64)
        return vis, None

    # -- sleep machinery ------------------------------------------------------

    def _trigger_reason(self, h_t: float, rho_t: float, step: int) -> str:
        mean, std, n = self.trigger.entropy_stats()
        parts = []
        if n >= self.trigger.min_samples and h_t > mean + self.trigger.kappa * std:
            parts.append("entropy")
        if rho_t > self.trigger.rho_max:
            parts.append("density")
        if step % self.trigger.n_max == 0:
            parts.append("periodic")
        return "+".join(parts)

    def _rebuild_rows(self, old_tau: np.ndarray, result, retentions: np.ndarray,
                      visible_keys: np.ndarray, cycle_step: int) -> None:
        """Apply one hard transform to every layer's attention rows."""
        cfg = self.cfg
        old_index = {int(t): i for i, t in enumerate(old_tau)}
        cons_cluster = {int(t): c for c, t in enumerate(result.consolidated_tau)}
        factors = cache_mod.decay_factors(cycle_step - result.tau, self.decay_rate)
        for layer in range(cfg.n_layers):
            old_k = [k.reshape(cfg.d_model) for k in self.keys[layer]]
            old_v = [v.reshape(cfg.d_model) for v in self.vals[layer]]
            new_k, new_v = [], []
            for i, t in enumerate(result.tau):
                t = int(t)
                if t in cons_cluster:
                    members = result.clusters[cons_cluster[t]]
                    alpha = result.alphas[cons_cluster[t]]
                    if layer == 0:
                        kf = result.keys[i]
                        vf = result.values[i]
                    else:
                        r = retentions[members].astype(np.float64)
                        mk = np.stack([old_k[j] for j in members]).astype(np.float64)
                        mv = np.stack([old_v[j] for j in members]).astype(np.float64)
                        kf = ((r[:, None] * mk).sum(axis=0)
                              / (r.sum() + consol_mod.CONSOLIDATION_EPS)).astype(np.float32)
                        vf = (alpha @ mv).astype(np.float32)
                    new_k.append(self._heads(kf * factors[i]))
                    new_v.append(self._heads(vf))
                else:
                    j = old_index[t]
                    if layer == 0:
                        new_k.append(self._heads(visible_keys[i]))
                    else:
                        new_k.append(self._heads(old_k[j] * factors[i]))
                    new_v.append(self._heads(old_v[j]))
            self.keys[layer] = new_k
            self.vals[layer] = new_v

    def _sleep_phase(self, x: np.ndarray, logits: np.ndarray, probs0: np.ndarray,
                     force_cycle: bool) -> np.ndarray:
        p = self.pos
        d = self.cfg.d_model
        self.meta.append(self.keys[0][-1].reshape(d), self.vals[0][-1].reshape(d), p)
        self.meta.accumulate(probs0.mean(axis=0).astype(np.float64))
        self.meta.refresh(self._tensors)
        h_t = sched_mod.attention_entropy(probs0)
        rho_t = self.meta.conflict_density()
        reason = self._trigger_reason(h_t, rho_t, p + 1)
        fired = self.trigger.step(h_t, rho_t, p + 1)
        if not (fired or force_cycle):
            return logits
        before = len(self.meta)
        if self.sleep == "soft":
            bias = sched_mod.run_sleep_cycle(
                self.meta, self._tensors, self._tensors, self._tensors,
                "soft", p, beta=self.beta, decay_rate=self.decay_rate)
            logits, _ = self._process(x, vis=None, mult=None,
                                      bias=bias.astype(np.float32), append=False)
            after = before
        else:
            old_tau = self.meta.tau.copy()
            r, visible_keys, result = sched_mod.run_sleep_cycle(
                self.meta, self._tensors, self._tensors, self._tensors,
                "hard", p, beta=self.beta, decay_rate=self.decay_rate)
            self._rebuild_rows(old_tau, result, r, visible_keys, p)
            after = len(self.meta)
        self.events.append(TriggerEvent(
            step=p + 1, entropy=h_t, density=rho_t, reason=reason,
            mode=self.sleep, entries_before=before, entries_after=after,
            forced=not fired))
        return logits

    # -- public stepping ------------------------------------------------------

    def step(self, token: int, *, force_cycle: bool = False) -> np.ndarray:
        """Process one token; returns this position's next-token logits."""
        cfg = self.cfg
        if self.pos >= cfg.max_seq_len:
            raise ValueError("sequence exceeds the position table")
        x = (self.w["model.tok_emb"][int(token)] * np.float32(np.sqrt(cfg.d_model))
             + position_table(cfg.max_seq_len, cfg.d_model)[self.pos])
        vis, mult = self._visibility()
        logits, probs0 = self._process(x, vis=vis, mult=mult, bias=None, append=True)
        self.last_unbiased = logits
        if isinstance(self.policy, base_mod.HeavyHitter):
            self.tally[vis] += probs0.mean(axis=0)
        if self.sleep is not None:
            logits = self._sleep_phase(x, logits, probs0, force_cycle)
        self.pos += 1
        return logits


def decode(params: dict, cfg: ModelConfig, tokens, **kwargs) -> np.ndarray:
    """Convenience loop: (T, vocab) logits for one token sequence."""
    dec = StreamDecoder(params, cfg, **kwargs)
    return np.stack([dec.step(int(t)) for t in np.asarray(tokens)])


def run_demo(params: dict, cfg: ModelConfig, episode, *,
             mode: str = "soft") -> dict:
    """Decode one episode with adaptive cycles; query gets a forced soft cycle.

    Returns trigger events and the query-position predictions (biased and
    unbiased for soft mode; post-transform for hard mode).
    """
    dec = StreamDecoder(params, cfg, sleep=mode)
    tokens = episode.tokens
    logits = None
    for i, tok in enumerate(tokens):
        last = i == len(tokens) - 1
        logits = dec.step(int(tok), force_cycle=last and mode == "soft")
    query = episode.queries[-1]
    predicted = int(np.argmax(logits))
    unbiased = int(np.argmax(dec.last_unbiased))
    return {
        "mode": mode,
        "depth": episode.depth,
        "n_tokens": len(tokens),
        "events": dec.events,
        "gold": query.gold,
        "predicted": predicted,
        "predicted_unbiased": unbiased,
        "correct": predicted == query.gold,
        "stale": predicted in query.superseded_values,
        "final_entries": len(dec.meta),
    }
