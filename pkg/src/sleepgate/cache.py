"""Metadata side of the augmented KV cache.

Every processed position owns one metadata record shared by all layers and
heads: the designated-layer key/value (layer 0, heads concatenated), a
64-dim semantic signature, a sticky superseded flag, a cumulative-attention
tally, and its original position. Signatures come from a small learned
projection over the key plus a local mean pool; a superseded flag is raised
when any later entry's signature is too similar.

Keys handed to attention during a sleep cycle are decayed by age; the
originals stay untouched so repeated cycles never compound decay and
features always see undecayed keys.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor

SIGNATURE_DIM = 64
POOL_WINDOW = 4
CONFLICT_THRESHOLD = 0.85
DECAY_RATE = 0.01


def init_tagger_params(rng: np.random.Generator, d_model: int = 128,
                       sig_dim: int = SIGNATURE_DIM) -> dict[str, Tensor]:
    return {
        "tagger.w_s": Tensor(rng.normal(0.0, 0.02, (2 * d_model, sig_dim)).astype(np.float32),
                             requires_grad=True),
        "tagger.b_s": Tensor(np.zeros(sig_dim, dtype=np.float32), requires_grad=True),
        "tagger.ln.gain": Tensor(np.ones(sig_dim, dtype=np.float32), requires_grad=True),
        "tagger.ln.shift": Tensor(np.zeros(sig_dim, dtype=np.float32), requires_grad=True),
    }


_pool_cache: dict[tuple, np.ndarray] = {}


def pool_matrix(t: int, window: int = POOL_WINDOW) -> np.ndarray:
    """(t, t) averaging matrix: row i spans positions max(0,i-w)..min(t-1,i+w)."""
    key = (t, window)
    if key not in _pool_cache:
        m = np.zeros((t, t), dtype=np.float32)
        for i in range(t):
            lo, hi = max(0, i - window), min(t - 1, i + window)
            m[i, lo:hi + 1] = 1.0 / (hi - lo + 1)
        _pool_cache[key] = m
    return _pool_cache[key]


def signatures(tagger: dict[str, Tensor], keys: Tensor,
               layernorm_eps: float = 1e-5) -> Tensor:
    """Signatures for a (B, T, d) batch of designated-layer keys -> (B, T, 64)."""
    t = keys.data.shape[-2]
    pool = ag.matmul(Tensor(pool_matrix(t)), keys)
    feat = ag.concat([keys, pool], axis=-1)
    proj = ag.add(ag.matmul(feat, tagger["tagger.w_s"]), tagger["tagger.b_s"])
    return ag.layernorm(proj, tagger["tagger.ln.gain"], tagger["tagger.ln.shift"],
                        layernorm_eps)


def signatures_np(tagger: dict[str, Tensor], keys: np.ndarray) -> np.ndarray:
    """Non-graph signature computation for a single (T, d) key matrix."""
    with ag.no_grad():
        return signatures(tagger, Tensor(keys[None].astype(np.float32))).data[0]


def cosine_matrix(sigs: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities over the last-axis vectors of (..., T, D)."""
    norm = np.linalg.norm(sigs, axis=-1, keepdims=True)
    unit = sigs / np.maximum(norm, 1e-12)
    return unit @ np.swapaxes(unit, -1, -2)


def conflict_flags(sigs: np.ndarray, lengths: np.ndarray | None = None,
                   threshold: float = CONFLICT_THRESHOLD) -> np.ndarray:
    """sigma_i = 1 iff some later entry j > i has cos(s_i, s_j) > threshold.

    sigs: (T, D) or (B, T, D); lengths masks padded tail entries per batch row.
    """
    single = sigs.ndim == 2
    if single:
        sigs = sigs[None]
    b, t, _ = sigs.shape
    cos = cosine_matrix(sigs)
    later = np.triu(np.ones((t, t), dtype=bool), k=1)
    hit = (cos > threshold) & later
    if lengths is not None:
        valid = np.arange(t)[None, :] < np.asarray(lengths)[:, None]
        hit &= valid[:, None, :]
        hit &= valid[:, :, None]
    flags = hit.any(axis=-1)
    return flags[0] if single else flags


def cum_attention(attn: np.ndarray, lengths: np.ndarray | None = None) -> np.ndarray:
    """Total attention received per key position, mean over heads.

    attn: (B, H, T, T) rows are softmax distributions; padded query rows are
    excluded so tallies only count real steps. Returns (B, T).
    """
    b, _, t, _ = attn.shape
    mean_heads = attn.mean(axis=1)
    if lengths is not None:
        valid = (np.arange(t)[None, :] < np.asarray(lengths)[:, None]).astype(attn.dtype)
        mean_heads = mean_heads * valid[:, :, None]
    return mean_heads.sum(axis=1)


def decay_factors(ages: np.ndarray, decay_rate: float = DECAY_RATE) -> np.ndarray:
    """(1 + age)^(-rate); age 0 -> 1.0, older entries shrink toward zero."""
    ages = np.asarray(ages, dtype=np.float64)
    if np.any(ages < 0):
        raise ValueError("entry ages must be non-negative")
    return np.power(1.0 + ages, -decay_rate).astype(np.float32)


class AugmentedCache:
    """Per-episode metadata store for streaming inference.

    Holds one record per surviving entry, ordered by original position tau.
    Signatures and flags are recomputed from the current entry list on
    demand; flags are sticky (once raised, never cleared by recomputation).
    """

    def __init__(self, d_model: int = 128, sig_dim: int = SIGNATURE_DIM):
        self.d_model = d_model
        self.sig_dim = sig_dim
        self.keys = np.zeros((0, d_model), dtype=np.float32)
        self.values = np.zeros((0, d_model), dtype=np.float32)
        self.tau = np.zeros(0, dtype=np.int64)
        self.sigma = np.zeros(0, dtype=bool)
        self.cum_attn = np.zeros(0, dtype=np.float64)
        self.sigs = np.zeros((0, sig_dim), dtype=np.float32)

    def __len__(self) -> int:
        return len(self.tau)

    def append(self, key: np.ndarray, value: np.ndarray, tau: int) -> None:
        if len(self.tau) and tau <= self.tau[-1]:
            raise ValueError(f"positions must be strictly increasing, got {tau} after {self.tau[-1]}")
        self.keys = np.concatenate([self.keys, key[None].astype(np.float32)])
        self.values = np.concatenate([self.values, value[None].astype(np.float32)])
        self.tau = np.append(self.tau, tau)
        self.sigma = np.append(self.sigma, False)
        self.cum_attn = np.append(self.cum_attn, 0.0)

    def refresh(self, tagger: dict[str, Tensor],
                threshold: float = CONFLICT_THRESHOLD) -> None:
        """Recompute signatures over the current entry list, raise new flags."""
        if not len(self):
            return
        self.sigs = signatures_np(tagger, self.keys)
        self.sigma = self.sigma | conflict_flags(self.sigs, threshold=threshold)

    def accumulate(self, head_mean_row: np.ndarray) -> None:
        """Add one query step's head-averaged attention over current entries."""
        if head_mean_row.shape != self.cum_attn.shape:
            raise ValueError("attention row length must match the entry count")
        self.cum_attn = self.cum_attn + head_mean_row

    def ages(self, step: int) -> np.ndarray:
        return step - self.tau

    def decayed_keys(self, step: int, decay_rate: float = DECAY_RATE) -> np.ndarray:
        """Attention-visible copy of keys for a sleep cycle at `step`."""
        return self.keys * decay_factors(self.ages(step), decay_rate)[:, None]

    def conflict_density(self) -> float:
        return float(self.sigma.mean()) if len(self) else 0.0

    def replace(self, keys, values, tau, sigma, cum_attn) -> None:
        """Install a transformed entry list (post hard sleep cycle)."""
        tau = np.asarray(tau, dtype=np.int64)
        if np.any(np.diff(tau) <= 0):
            raise ValueError("transformed entry positions must stay strictly increasing")
        self.keys = np.asarray(keys, dtype=np.float32).reshape(len(tau), self.d_model)
        self.values = np.asarray(values, dtype=np.float32).reshape(len(tau), self.d_model)
        self.tau = tau
        self.sigma = np.asarray(sigma, dtype=bool).copy()
        self.cum_attn = np.asarray(cum_attn, dtype=np.float64).copy()
        self.sigs = np.zeros((0, self.sig_dim), dtype=np.float32)
