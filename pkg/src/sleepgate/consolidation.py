"""Cluster-and-compress transform for Compress-marked cache entries.

Entries marked Compress are greedily clustered by signature similarity
(single linkage, threshold half the conflict threshold), and each cluster is
replaced by one consolidated entry: a retention-weighted mean key and a
recency-biased cross-attention mixture of projected values. Evict-marked
entries are dropped, Keep entries pass through, and the surviving list is
re-sorted by original position with metadata recomputed.

Used by the hard sleep-cycle variant; the default soft path only biases
attention and never calls this transform during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cache as cache_mod
from .autograd import Tensor
from .gate import Action

CLUSTER_THRESHOLD = 0.425
RECENCY_WEIGHT = 2.0
CONSOLIDATION_EPS = 1e-6


def init_consolidation_params(rng: np.random.Generator, d_model: int = 128) -> dict[str, Tensor]:
    return {
        "consol.w_k": Tensor(rng.normal(0.0, 0.02, (d_model, d_model)).astype(np.float32),
                             requires_grad=True),
        "consol.b_k": Tensor(np.zeros(d_model, dtype=np.float32), requires_grad=True),
        "consol.w_v": Tensor(rng.normal(0.0, 0.02, (d_model, d_model)).astype(np.float32),
                             requires_grad=True),
        "consol.b_v": Tensor(np.zeros(d_model, dtype=np.float32), requires_grad=True),
        "consol.q_latest": Tensor(rng.normal(0.0, 0.02, d_model).astype(np.float32),
                                  requires_grad=True),
    }


def greedy_cluster(sigs: np.ndarray, threshold: float = CLUSTER_THRESHOLD) -> list[list[int]]:
    """Cluster entries in position order.

    Each entry joins the cluster holding its most similar member if that
    similarity exceeds the threshold, else starts a new cluster.
    """
    n = len(sigs)
    if n == 0:
        return []
    cos = cache_mod.cosine_matrix(sigs)
    clusters: list[list[int]] = []
    for i in range(n):
        best_c, best_sim = -1, -np.inf
        for ci, members in enumerate(clusters):
            sim = cos[i, members].max()
            if sim > best_sim:
                best_c, best_sim = ci, sim
        if best_c >= 0 and best_sim > threshold:
            clusters[best_c].append(i)
        else:
            clusters.append([i])
    return clusters


def consolidate(keys: np.ndarray, values: np.ndarray, retentions: np.ndarray,
                tau: np.ndarray, params: dict[str, Tensor],
                eta: float = RECENCY_WEIGHT,
                eps: float = CONSOLIDATION_EPS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Compress one cluster to (k*, v*, alpha).

    k* is the retention-weighted mean key; alpha are recency-biased
    cross-attention weights from a learned query; v* mixes projected values.
    """
    if len(keys) == 0:
        raise ValueError("cannot consolidate an empty cluster")
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    r = np.asarray(retentions, dtype=np.float64)
    d = keys.shape[-1]

    k_star = (r[:, None] * keys).sum(axis=0) / (r.sum() + eps)

    tau = np.asarray(tau, dtype=np.float64)
    tau_rel = tau / tau.max() if tau.max() > 0 else np.ones_like(tau)
    w_k, b_k = params["consol.w_k"].data, params["consol.b_k"].data
    w_v, b_v = params["consol.w_v"].data, params["consol.b_v"].data
    q = params["consol.q_latest"].data
    logits = (keys @ w_k + b_k) @ q / np.sqrt(d) + eta * tau_rel
    z = logits - logits.max()
    alpha = np.exp(z) / np.exp(z).sum()
    v_star = alpha @ (values @ w_v + b_v)
    return k_star.astype(np.float32), v_star.astype(np.float32), alpha


@dataclass
class TransformResult:
    keys: np.ndarray
    values: np.ndarray
    tau: np.ndarray
    sigma: np.ndarray
    cum_attn: np.ndarray
    sigs: np.ndarray
    clusters: list            # clusters of compress-entry indices (input indexing)
    consolidated_tau: list    # tau values of the entries created by compression
    alphas: list              # per-cluster value-mixture weights, same order as clusters


def hard_sleep_transform(keys, values, tau, sigma, cum_attn, sigs,
                         actions: np.ndarray, retentions: np.ndarray,
                         params: dict[str, Tensor], tagger: dict[str, Tensor],
                         cluster_threshold: float = CLUSTER_THRESHOLD,
                         conflict_threshold: float = cache_mod.CONFLICT_THRESHOLD,
                         eta: float = RECENCY_WEIGHT) -> TransformResult:
    """Apply gate decisions: keep, compress clusters, evict; re-sort by tau.

    The consolidated entry inherits the newest member's position, a cleared
    superseded flag, the summed attention tally, and a signature computed
    from k* alone. Flags over the surviving list are re-scanned and sticky.
    """
    actions = np.asarray(actions)
    keep = np.flatnonzero(actions == Action.KEEP)
    comp = np.flatnonzero(actions == Action.COMPRESS)

    rows = [(int(tau[i]), keys[i], values[i], bool(sigma[i]), float(cum_attn[i]), sigs[i])
            for i in keep]
    clusters_local = greedy_cluster(sigs[comp], cluster_threshold) if len(comp) else []
    clusters = [[int(comp[i]) for i in members] for members in clusters_local]
    consolidated_tau = []
    alphas = []
    for members in clusters:
        k_star, v_star, alpha = consolidate(keys[members], values[members],
                                            retentions[members], tau[members], params, eta)
        sig_star = cache_mod.signatures_np(tagger, k_star[None])[0]
        t_star = int(tau[members].max())
        consolidated_tau.append(t_star)
        alphas.append(alpha)
        rows.append((t_star, k_star, v_star, False, float(cum_attn[members].sum()), sig_star))

    rows.sort(key=lambda row: row[0])
    if rows:
        new_tau = np.array([r[0] for r in rows], dtype=np.int64)
        new_keys = np.stack([r[1] for r in rows]).astype(np.float32)
        new_values = np.stack([r[2] for r in rows]).astype(np.float32)
        inherited = np.array([r[3] for r in rows], dtype=bool)
        new_attn = np.array([r[4] for r in rows], dtype=np.float64)
        new_sigs = np.stack([r[5] for r in rows]).astype(np.float32)
        new_sigma = inherited | cache_mod.conflict_flags(new_sigs, threshold=conflict_threshold)
    else:
        d = keys.shape[-1] if hasattr(keys, "shape") else 128
        new_tau = np.zeros(0, dtype=np.int64)
        new_keys = np.zeros((0, d), dtype=np.float32)
        new_values = np.zeros((0, d), dtype=np.float32)
        new_sigma = np.zeros(0, dtype=bool)
        new_attn = np.zeros(0, dtype=np.float64)
        new_sigs = np.zeros((0, sigs.shape[-1] if hasattr(sigs, "shape") else 64), dtype=np.float32)
    return TransformResult(keys=new_keys, values=new_values, tau=new_tau,
                           sigma=new_sigma, cum_attn=new_attn, sigs=new_sigs,
                           clusters=clusters, consolidated_tau=consolidated_tau,
                           alphas=alphas)
