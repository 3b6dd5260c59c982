"""Clustering and cross-attention compression of Compress-marked entries."""

import numpy as np
import pytest

from sleepgate.cache import init_tagger_params, signatures_np
from sleepgate.consolidation import (CLUSTER_THRESHOLD, RECENCY_WEIGHT,
                                     consolidate, greedy_cluster,
                                     hard_sleep_transform,
                                     init_consolidation_params)
from sleepgate.gate import Action
from sleepgate.system import count_params


@pytest.fixture(scope="module")
def consol():
    return init_consolidation_params(np.random.default_rng(3))


@pytest.fixture(scope="module")
def tagger():
    return init_tagger_params(np.random.default_rng(4))


def test_parameter_count(consol):
    total, _ = count_params(consol)
    assert total == 33_152


# ---------------------------------------------------------------------------
# greedy_cluster


def test_orthogonal_signatures_stay_singletons():
    sigs = np.eye(5, 64, dtype=np.float32)
    assert greedy_cluster(sigs) == [[0], [1], [2], [3], [4]]


def test_identical_signatures_merge():
    sigs = np.tile(np.random.default_rng(0).normal(size=64).astype(np.float32), (4, 1))
    assert greedy_cluster(sigs) == [[0, 1, 2, 3]]


def test_mixed_similarity_hand_trace():
    # entries 0 and 1 nearly parallel, entry 2 orthogonal to both
    base = np.zeros((3, 64), dtype=np.float32)
    base[0, 0] = 1.0
    base[1, 0] = 1.0
    base[1, 1] = 0.2   # cos(0,1) ~ 0.98 > 0.425
    base[2, 5] = 1.0   # cos to others = 0
    assert greedy_cluster(base) == [[0, 1], [2]]


def test_threshold_is_exclusive_boundary():
    # similarity exactly at the threshold must NOT merge (rule is strict >)
    a = np.array([1.0, 0.0], dtype=np.float32)
    c, s = CLUSTER_THRESHOLD, float(np.sqrt(1 - CLUSTER_THRESHOLD**2))
    b = np.array([c, s], dtype=np.float32)
    sigs = np.stack([a, b])
    clusters = greedy_cluster(sigs)
    cos = float(a @ b)
    assert abs(cos - CLUSTER_THRESHOLD) < 1e-6
    assert clusters == [[0], [1]]


def test_empty_input():
    assert greedy_cluster(np.zeros((0, 64), dtype=np.float32)) == []


# ---------------------------------------------------------------------------
# consolidate


def test_singleton_cluster_identity(consol):
    rng = np.random.default_rng(1)
    k = rng.normal(size=(1, 128)).astype(np.float32)
    v = rng.normal(size=(1, 128)).astype(np.float32)
    k_star, v_star, alpha = consolidate(k, v, np.array([0.9]), np.array([7]), consol)
    assert alpha.shape == (1,)
    assert alpha[0] == pytest.approx(1.0)
    # k* = k * r/(r+eps), within float tolerance of k itself
    np.testing.assert_allclose(k_star, k[0], rtol=1e-5, atol=1e-6)
    expect_v = v[0] @ consol["consol.w_v"].data + consol["consol.b_v"].data
    np.testing.assert_allclose(v_star, expect_v, rtol=1e-5, atol=1e-6)


def test_recency_softmax_oracle(consol):
    # identical keys cancel the content term; logits reduce to eta * tau_rel
    k = np.tile(np.random.default_rng(2).normal(size=128).astype(np.float32), (2, 1))
    v = np.random.default_rng(5).normal(size=(2, 128)).astype(np.float32)
    _, _, alpha = consolidate(k, v, np.array([0.5, 0.5]), np.array([1, 2]), consol,
                              eta=2.0)
    # softmax(2*0.5, 2*1.0) = softmax(1, 2)
    expect = np.exp([1.0, 2.0]) / np.exp([1.0, 2.0]).sum()
    np.testing.assert_allclose(alpha, expect, rtol=1e-6)
    assert alpha[0] == pytest.approx(0.26894, abs=1e-4)
    assert alpha[1] == pytest.approx(0.73106, abs=1e-4)


def test_alpha_normalization_random_clusters(consol):
    rng = np.random.default_rng(6)
    for n in (1, 2, 5, 17):
        k = rng.normal(size=(n, 128)).astype(np.float32)
        v = rng.normal(size=(n, 128)).astype(np.float32)
        r = rng.uniform(0.05, 1.0, n)
        tau = np.sort(rng.choice(1000, size=n, replace=False))
        _, _, alpha = consolidate(k, v, r, tau, consol)
        assert alpha.sum() == pytest.approx(1.0, abs=1e-5)
        assert np.all(alpha > 0)


def test_recency_dominance_monotone(consol):
    # identical keys, eta > 0: alpha strictly increases with tau
    k = np.tile(np.random.default_rng(7).normal(size=128).astype(np.float32), (5, 1))
    v = np.random.default_rng(8).normal(size=(5, 128)).astype(np.float32)
    tau = np.array([10, 20, 30, 40, 50])
    _, _, alpha = consolidate(k, v, np.full(5, 0.5), tau, consol, eta=RECENCY_WEIGHT)
    assert np.all(np.diff(alpha) > 0)


def test_weighted_mean_key(consol):
    rng = np.random.default_rng(9)
    k = rng.normal(size=(3, 128)).astype(np.float32)
    v = rng.normal(size=(3, 128)).astype(np.float32)
    r = np.array([0.2, 0.3, 0.5])
    k_star, _, _ = consolidate(k, v, r, np.array([1, 2, 3]), consol)
    expect = (r[:, None] * k).sum(axis=0) / (r.sum() + 1e-6)
    np.testing.assert_allclose(k_star, expect.astype(np.float32), rtol=1e-5)


def test_equal_retention_identical_keys(consol):
    k = np.tile(np.random.default_rng(10).normal(size=128).astype(np.float32), (4, 1))
    v = np.random.default_rng(11).normal(size=(4, 128)).astype(np.float32)
    k_star, _, _ = consolidate(k, v, np.full(4, 0.7), np.arange(1, 5), consol)
    np.testing.assert_allclose(k_star, k[0], rtol=1e-4, atol=1e-5)


def test_empty_cluster_rejected(consol):
    with pytest.raises(ValueError):
        consolidate(np.zeros((0, 128)), np.zeros((0, 128)), np.zeros(0),
                    np.zeros(0, dtype=int), consol)


# ---------------------------------------------------------------------------
# hard_sleep_transform


def _entries(n, rng):
    keys = rng.normal(size=(n, 128)).astype(np.float32)
    values = rng.normal(size=(n, 128)).astype(np.float32)
    tau = np.arange(1, n + 1, dtype=np.int64)
    sigma = np.zeros(n, dtype=bool)
    cum = rng.uniform(0, 1, n)
    return keys, values, tau, sigma, cum


def test_all_keep_is_identity(consol, tagger):
    rng = np.random.default_rng(12)
    keys, values, tau, sigma, cum = _entries(6, rng)
    sigs = signatures_np(tagger, keys)
    res = hard_sleep_transform(keys, values, tau, sigma, cum, sigs,
                               np.full(6, Action.KEEP), np.full(6, 0.9),
                               consol, tagger)
    np.testing.assert_array_equal(res.tau, tau)
    np.testing.assert_allclose(res.keys, keys)
    np.testing.assert_allclose(res.values, values)
    np.testing.assert_allclose(res.cum_attn, cum)
    assert res.clusters == []


def test_all_evict_empties_cache(consol, tagger):
    rng = np.random.default_rng(13)
    keys, values, tau, sigma, cum = _entries(4, rng)
    sigs = signatures_np(tagger, keys)
    res = hard_sleep_transform(keys, values, tau, sigma, cum, sigs,
                               np.full(4, Action.EVICT), np.full(4, 0.1),
                               consol, tagger)
    assert len(res.tau) == 0
    assert res.keys.shape == (0, 128)


def test_size_arithmetic_4keep_4compress_2evict(consol, tagger):
    rng = np.random.default_rng(14)
    keys, values, tau, sigma, cum = _entries(10, rng)
    # force the 4 compress-marked entries into one cluster: identical keys
    keys[4:8] = keys[4]
    sigs = signatures_np(tagger, keys)
    actions = np.array([Action.KEEP] * 4 + [Action.COMPRESS] * 4 + [Action.EVICT] * 2)
    res = hard_sleep_transform(keys, values, tau, sigma, cum, sigs,
                               actions, np.full(10, 0.5), consol, tagger)
    assert res.clusters == [[4, 5, 6, 7]]
    assert len(res.tau) == 5
    # consolidated entry inherits the newest member position
    assert res.consolidated_tau == [8]
    assert 8 in res.tau.tolist()


def test_output_never_larger(consol, tagger):
    rng = np.random.default_rng(15)
    for trial in range(20):
        n = int(rng.integers(1, 12))
        keys, values, tau, sigma, cum = _entries(n, rng)
        sigs = signatures_np(tagger, keys)
        actions = rng.integers(0, 3, n)
        res = hard_sleep_transform(keys, values, tau, sigma, cum, sigs,
                                   actions, rng.uniform(0, 1, n), consol, tagger)
        assert len(res.tau) <= n
        assert np.all(np.diff(res.tau) > 0)   # strictly tau-sorted
        assert len(res.alphas) == len(res.clusters)
        for members, alpha in zip(res.clusters, res.alphas):
            assert len(alpha) == len(members)
            assert alpha.sum() == pytest.approx(1.0, abs=1e-5)


def test_consolidated_entry_starts_unflagged(consol, tagger):
    rng = np.random.default_rng(16)
    keys, values, tau, sigma, cum = _entries(5, rng)
    keys[2:4] = keys[2]
    sigs = signatures_np(tagger, keys)
    actions = np.array([Action.KEEP, Action.KEEP, Action.COMPRESS,
                        Action.COMPRESS, Action.KEEP])
    res = hard_sleep_transform(keys, values, tau, sigma, cum, sigs,
                               actions, np.full(5, 0.5), consol, tagger)
    pos = res.tau.tolist().index(4)   # consolidated entry holds max member tau
    # flags mark the EARLIER of a similar pair, so entries older than the
    # consolidated one can never raise its flag
    assert not bool(res.sigma[pos]) or np.any(res.tau > 4)


def test_consolidated_signature_recomputed(consol, tagger):
    rng = np.random.default_rng(17)
    keys, values, tau, sigma, cum = _entries(3, rng)
    keys[0:2] = keys[0]
    sigs = signatures_np(tagger, keys)
    actions = np.array([Action.COMPRESS, Action.COMPRESS, Action.KEEP])
    res = hard_sleep_transform(keys, values, tau, sigma, cum, sigs,
                               actions, np.array([0.5, 0.5, 0.9]), consol, tagger)
    pos = res.tau.tolist().index(2)
    expect = signatures_np(tagger, res.keys[pos][None])[0]
    np.testing.assert_allclose(res.sigs[pos], expect, rtol=1e-5)
