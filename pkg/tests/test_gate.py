import numpy as np
import pytest

from sleepgate.autograd import Tensor
from sleepgate.cache import init_tagger_params, signatures
from sleepgate.gate import (Action, FEATURE_WIDTH, act, anneal_temperature,
                            action_logits, assemble_features, gumbel_relax3,
                            gumbel_relax_binary, init_gate_params, retention,
                            soft_bias)


@pytest.fixture
def gate(rng):
    return init_gate_params(rng)


def make_features(rng, b=1, t=6):
    tagger = init_tagger_params(rng)
    keys = Tensor(rng.normal(0.0, 1.0, (b, t, 128)).astype(np.float32))
    values = Tensor(rng.normal(0.0, 1.0, (b, t, 128)).astype(np.float32))
    sigs = signatures(tagger, keys)
    ages = np.tile(np.arange(t)[::-1], (b, 1)).copy()
    sigma = np.zeros((b, t), dtype=bool)
    cum = np.abs(rng.normal(0.0, 1.0, (b, t)))
    return assemble_features(keys, values, sigs, ages, sigma, cum)


def test_feature_width(rng):
    feats = make_features(rng)
    assert feats.data.shape == (1, 6, FEATURE_WIDTH)
    assert FEATURE_WIDTH == 578


def test_feature_blocks_land_where_documented(rng):
    t = 6
    tagger = init_tagger_params(rng)
    keys = Tensor(rng.normal(0.0, 1.0, (1, t, 128)).astype(np.float32))
    values = Tensor(rng.normal(0.0, 1.0, (1, t, 128)).astype(np.float32))
    sigs = signatures(tagger, keys)
    ages = np.zeros((1, t), dtype=np.int64)
    sigma = np.array([[True, False, True, False, False, False]])
    cum = np.full((1, t), 3.0)
    feats = assemble_features(keys, values, sigs, ages, sigma, cum).data
    np.testing.assert_allclose(feats[0, :, :128], keys.data[0], atol=1e-6)
    np.testing.assert_allclose(feats[0, :, 128:256], values.data[0], atol=1e-6)
    np.testing.assert_allclose(feats[0, :, 448], sigma[0].astype(np.float32))
    np.testing.assert_allclose(feats[0, :, 449], 3.0 / 4.0, atol=1e-6)   # a/(1+a)


def test_context_summary_is_mean_of_recent_keys(rng):
    t = 20
    tagger = init_tagger_params(rng)
    keys = rng.normal(0.0, 1.0, (1, t, 128)).astype(np.float32)
    feats = assemble_features(Tensor(keys), Tensor(keys), signatures(tagger, Tensor(keys)),
                              np.zeros((1, t), np.int64), np.zeros((1, t), bool),
                              np.zeros((1, t))).data
    want = keys[0, t - 16:].mean(axis=0)
    for i in range(t):
        np.testing.assert_allclose(feats[0, i, 450:], want, atol=1e-5)


def test_retention_in_unit_interval(gate, rng):
    feats = make_features(rng, b=2, t=5)
    r = retention(gate, feats)
    assert r.data.shape == (2, 5)
    assert np.all(r.data > 0.0) and np.all(r.data < 1.0)


def test_retention_rejects_nonfinite(gate, rng):
    feats = make_features(rng)
    feats.data[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        retention(gate, feats)


def test_soft_bias_frozen_values():
    r = Tensor(np.array([0.01, 1e-9, 0.5, 1.0]))
    b = soft_bias(r).data
    np.testing.assert_allclose(b[0], -23.0259, atol=1e-3)
    np.testing.assert_allclose(b[1], -69.0776, atol=1e-3)   # floored at 1e-6
    np.testing.assert_allclose(b[2], -3.4657, atol=1e-3)
    np.testing.assert_allclose(b[3], 0.0, atol=1e-6)
    assert np.all(b <= 0.0)


def test_act_threshold_boundaries():
    r = np.array([0.71, 0.7, 0.699999, 0.3, 0.299999, 0.0, 1.0])
    got = act(r)
    want = [Action.KEEP, Action.KEEP, Action.COMPRESS, Action.COMPRESS,
            Action.EVICT, Action.EVICT, Action.KEEP]
    np.testing.assert_array_equal(got, want)


def test_gumbel_relax3_rows_normalize(rng):
    logits = Tensor(rng.normal(0.0, 1.0, (4, 3)))
    y = gumbel_relax3(logits, 0.5, rng)
    np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        gumbel_relax3(logits, 0.0, rng)


def test_gumbel_binary_low_temperature_sharpens(rng):
    logit = Tensor(np.zeros(4000))
    noise = np.asarray(np.random.default_rng(3).gumbel(size=4000)
                       - np.random.default_rng(4).gumbel(size=4000), dtype=np.float32)
    warm = gumbel_relax_binary(logit, 1.0, rng, noise=noise).data
    cold = gumbel_relax_binary(logit, 0.1, rng, noise=noise).data
    # colder samples concentrate near {0, 1}
    assert np.abs(cold - 0.5).mean() > np.abs(warm - 0.5).mean()
    assert np.all((cold >= 0) & (cold <= 1))


def test_gumbel_noise_is_seed_deterministic(rng):
    logits = Tensor(np.zeros((2, 3)))
    a = gumbel_relax3(logits, 1.0, np.random.default_rng(8)).data
    b = gumbel_relax3(logits, 1.0, np.random.default_rng(8)).data
    np.testing.assert_array_equal(a, b)


def test_action_head_requires_opt_in(rng):
    plain = init_gate_params(np.random.default_rng(0))
    feats = make_features(rng)
    with pytest.raises(KeyError):
        action_logits(plain, feats)
    extended = init_gate_params(np.random.default_rng(0), include_action_head=True)
    logits = action_logits(extended, feats)
    assert logits.data.shape == (1, 6, 3)


def test_anneal_temperature_schedule():
    assert anneal_temperature(1, 30) == pytest.approx(1.0)
    assert anneal_temperature(30, 30) == pytest.approx(0.1)
    mid = anneal_temperature(15, 30)
    assert 0.1 < mid < 1.0
    assert anneal_temperature(5, 1) == pytest.approx(0.1)
