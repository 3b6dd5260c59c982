"""Sleep-cycle triggering and cycle orchestration."""

import numpy as np
import pytest

from sleepgate.cache import AugmentedCache, init_tagger_params
from sleepgate.consolidation import init_consolidation_params
from sleepgate.gate import init_gate_params
from sleepgate.scheduler import (ENTROPY_MIN_SAMPLES, SLEEP_INTERVAL_MAX,
                                 TriggerState, attention_entropy,
                                 conflict_density, gate_cache_entries,
                                 run_sleep_cycle)


# ---------------------------------------------------------------------------
# entropy and density signals


def test_uniform_attention_entropy():
    for m in (2, 4, 16):
        w = np.full((3, m), 1.0 / m)
        assert attention_entropy(w) == pytest.approx(np.log(m), abs=1e-12)


def test_one_hot_entropy_is_zero():
    w = np.zeros((2, 8))
    w[:, 3] = 1.0
    assert attention_entropy(w) == 0.0


def test_mixed_heads_average():
    # one head uniform over 4, one head one-hot: (ln 4 + 0) / 2
    w = np.zeros((2, 4))
    w[0] = 0.25
    w[1, 0] = 1.0
    assert attention_entropy(w) == pytest.approx(np.log(4) / 2, abs=1e-12)
    assert attention_entropy(w) == pytest.approx(0.6931, abs=1e-4)


def test_single_row_input():
    w = np.full(5, 0.2)
    assert attention_entropy(w) == pytest.approx(np.log(5))


def test_conflict_density_cases():
    assert conflict_density(np.zeros(5, dtype=bool)) == 0.0
    assert conflict_density(np.array([1, 1, 0, 0, 0], dtype=bool)) == pytest.approx(0.4)
    assert conflict_density(np.ones(3, dtype=bool)) == 1.0
    assert conflict_density(np.zeros(0, dtype=bool)) == 0.0


# ---------------------------------------------------------------------------
# trigger logic


def test_density_clause_fires_alone():
    st = TriggerState()
    assert st.should_trigger(h_t=0.0, rho_t=0.41, step=5)


def test_periodic_clause_fires_alone():
    st = TriggerState()
    assert st.should_trigger(h_t=0.0, rho_t=0.0, step=SLEEP_INTERVAL_MAX)
    assert st.should_trigger(h_t=0.0, rho_t=0.0, step=2 * SLEEP_INTERVAL_MAX)


def test_quiet_signals_do_not_fire():
    st = TriggerState()
    for h in (1.0, 1.1, 0.9, 1.0, 1.05, 0.95, 1.0, 1.0):
        st.step(h, 0.0, 1)
    mean, _, n = st.entropy_stats()
    assert n == 8
    assert not st.should_trigger(h_t=mean, rho_t=0.1, step=5)


def test_entropy_spike_fires_after_warmup():
    st = TriggerState()
    for h in (1.0, 1.1, 0.9, 1.0, 1.05, 0.95, 1.0, 1.0):
        st.step(h, 0.0, 1)
    mean, std, _ = st.entropy_stats()
    assert st.should_trigger(h_t=mean + 1.6 * std, rho_t=0.0, step=5)
    assert not st.should_trigger(h_t=mean + 1.4 * std, rho_t=0.0, step=5)


def test_cold_start_guard_blocks_entropy_clause():
    st = TriggerState()
    for h in [1.0] * (ENTROPY_MIN_SAMPLES - 1):
        st.step(h, 0.0, 1)
    # huge spike, but fewer than 8 samples recorded: entropy clause inactive
    assert not st.should_trigger(h_t=50.0, rho_t=0.0, step=5)
    st.step(1.0, 0.0, 2)
    assert st.should_trigger(h_t=50.0, rho_t=0.0, step=5)


def test_density_monotonicity():
    st = TriggerState()
    rng = np.random.default_rng(0)
    for rho in rng.uniform(0, 1, 50):
        if st.should_trigger(1.0, rho, 3):
            assert st.should_trigger(1.0, min(rho + 0.2, 1.0), 3)


def test_fallback_guarantee_any_128_window():
    st = TriggerState()
    # quiet entropy, quiet density: only the periodic clause can fire
    fired = [st.step(1.0, 0.0, t) for t in range(1, 513)]
    fired = np.array(fired)
    for lo in range(len(fired) - SLEEP_INTERVAL_MAX + 1):
        assert fired[lo:lo + SLEEP_INTERVAL_MAX].any()


def test_window_is_bounded():
    st = TriggerState()
    for t in range(1, 200):
        st.step(1.0 + 0.001 * t, 0.0, t)
    assert len(st.window) <= 64


# ---------------------------------------------------------------------------
# run_sleep_cycle


@pytest.fixture(scope="module")
def modules():
    rng = np.random.default_rng(9)
    gate = init_gate_params(rng)
    tagger = init_tagger_params(np.random.default_rng(10))
    consol = init_consolidation_params(np.random.default_rng(11))
    return gate, tagger, consol


def _filled_cache(n, rng, d=128):
    cache = AugmentedCache(d_model=d)
    for i in range(n):
        cache.append(rng.normal(size=d).astype(np.float32),
                     rng.normal(size=d).astype(np.float32), tau=i)
    return cache


def test_soft_cycle_empty_cache(modules):
    gate, tagger, consol = modules
    bias = run_sleep_cycle(AugmentedCache(), gate, tagger, consol, "soft", step=0)
    assert bias.shape == (0,)


def test_soft_cycle_zero_gate_uniform_bias(modules):
    _, tagger, consol = modules
    gate_zero = {k: type(v)(np.zeros_like(v.data), requires_grad=False)
                 for k, v in init_gate_params(np.random.default_rng(0)).items()}
    cache = _filled_cache(6, np.random.default_rng(12))
    bias = run_sleep_cycle(cache, gate_zero, tagger, consol, "soft", step=10)
    # zero weights -> r = sigmoid(0) = 0.5 everywhere -> bias = 5 ln 0.5
    np.testing.assert_allclose(bias, 5.0 * np.log(0.5), atol=1e-6)
    assert bias[0] == pytest.approx(-3.466, abs=1e-3)


def test_soft_cycle_leaves_cache_intact(modules):
    gate, tagger, consol = modules
    cache = _filled_cache(5, np.random.default_rng(13))
    keys_before = cache.keys.copy()
    run_sleep_cycle(cache, gate, tagger, consol, "soft", step=8)
    assert len(cache) == 5
    np.testing.assert_array_equal(cache.keys, keys_before)


def test_hard_cycle_bookkeeping(modules):
    gate, tagger, consol = modules
    cache = _filled_cache(10, np.random.default_rng(14))
    r, visible, result = run_sleep_cycle(cache, gate, tagger, consol, "hard", step=12)
    assert r.shape == (10,)
    assert len(cache) == len(result.tau) <= 10
    assert visible.shape == (len(cache), 128)
    assert np.all(np.diff(cache.tau) > 0)
    np.testing.assert_array_equal(cache.sigs, result.sigs)


def test_hard_cycle_empty_cache(modules):
    gate, tagger, consol = modules
    r, visible, result = run_sleep_cycle(AugmentedCache(), gate, tagger, consol,
                                         "hard", step=3)
    assert r.shape == (0,)
    assert len(result.tau) == 0


def test_unknown_mode_rejected(modules):
    gate, tagger, consol = modules
    with pytest.raises(ValueError):
        run_sleep_cycle(AugmentedCache(), gate, tagger, consol, "firm", step=0)


def test_gate_entries_step_validation(modules):
    gate, _, _ = modules
    cache = _filled_cache(4, np.random.default_rng(15))
    with pytest.raises(ValueError):
        gate_cache_entries(cache, gate, step=1)   # entries at tau 2,3 are "future"


def test_gate_entries_scores_every_entry(modules):
    gate, tagger, _ = modules
    cache = _filled_cache(7, np.random.default_rng(16))
    cache.refresh(tagger)
    r = gate_cache_entries(cache, gate, step=20)
    assert r.shape == (7,)
    assert np.all((r > 0) & (r < 1))
