"""Loss terms, optimizer, batching, and the staged training loops."""

import json

import numpy as np
import pytest

from sleepgate import data as data_mod
from sleepgate import model as md
from sleepgate import system as sy
from sleepgate import training as tr
from sleepgate.autograd import Tensor
from sleepgate.config import HyperParams, ModelConfig, stream_rng

CFG = ModelConfig()


# ---------------------------------------------------------------------------
# loss oracles


def test_wake_loss_uniform_logits():
    logits = Tensor(np.zeros((2, 5, 1024), dtype=np.float32))
    targets = np.full((2, 5), 7, dtype=np.int64)
    mask = np.ones((2, 5), dtype=bool)
    loss = tr.wake_loss(logits, targets, mask)
    assert float(loss.data) == pytest.approx(np.log(1024), abs=1e-5)


def test_sleep_loss_sees_only_query_positions():
    logits = np.random.default_rng(0).normal(size=(1, 6, 1024)).astype(np.float32)
    targets = np.zeros((1, 6), dtype=np.int64)
    targets[0, 5] = 300
    logits[0, 5] = 0.0
    logits[0, 5, 300] = 40.0          # confident and correct at the query
    qmask = np.zeros((1, 6), dtype=bool)
    qmask[0, 5] = True
    loss = tr.sleep_loss(Tensor(logits), targets, qmask)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-6)


def test_compress_loss_is_masked_mean():
    r = Tensor(np.array([[0.2, 0.4, 0.9, 0.5]], dtype=np.float32))
    mask = np.array([[True, True, True, False]])
    loss = tr.compress_loss(r, mask)
    assert float(loss.data) == pytest.approx(0.5, abs=1e-6)


def test_align_loss_oracle():
    r = Tensor(np.array([[0.8, 0.3]], dtype=np.float32))
    y = np.array([[1.0, 0.0]], dtype=np.float32)
    mask = np.ones((1, 2), dtype=bool)
    want = -(np.log(0.8) + np.log(0.7)) / 2
    loss = tr.align_loss(r, y, mask)
    assert float(loss.data) == pytest.approx(want, abs=1e-6)


def test_align_loss_clamp_blocks_infinities():
    r = Tensor(np.array([[0.0, 1.0]], dtype=np.float32))
    y = np.array([[1.0, 0.0]], dtype=np.float32)
    mask = np.ones((1, 2), dtype=bool)
    loss = tr.align_loss(r, y, mask)
    assert np.isfinite(float(loss.data))


def test_total_loss_decomposition():
    hp = HyperParams()
    parts = [Tensor(np.float32(v)) for v in (2.0, 1.0, 0.5, 0.25)]
    total = tr.total_loss(*parts, hp)
    want = 2.0 + 0.5 * 1.0 + 0.1 * 0.5 + 0.3 * 0.25
    assert float(total.data) == pytest.approx(want, abs=1e-6)


# ---------------------------------------------------------------------------
# optimizer


def test_adamw_first_step_oracle():
    p = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    opt = tr.AdamW({"p": p}, lr=1e-2, weight_decay=0.0)
    p.grad = np.ones(3, dtype=np.float32)
    opt.step()
    # bias-corrected m/sqrt(v) is exactly 1 on the first step
    np.testing.assert_allclose(p.data, -1e-2, rtol=1e-5)


def test_adamw_decoupled_weight_decay():
    p = Tensor(np.full(2, 10.0, dtype=np.float32), requires_grad=True)
    opt = tr.AdamW({"p": p}, lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(2, dtype=np.float32)
    opt.step()
    # zero gradient: the only movement is lr * wd * p
    np.testing.assert_allclose(p.data, 10.0 - 0.1 * 0.5 * 10.0, rtol=1e-5)


def test_adamw_skips_gradless_params():
    p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    opt = tr.AdamW({"p": p}, lr=0.1)
    opt.zero_grad()
    opt.step()
    np.testing.assert_array_equal(p.data, np.ones(2, dtype=np.float32))


# ---------------------------------------------------------------------------
# batching


def test_pack_single_episode_layout():
    ep = data_mod.gen_pi_episode(2, stream_rng(0, "data", 0))
    b = tr.pack([ep])
    assert b.tokens.shape == (1, 9)
    assert b.lengths[0] == 9
    assert b.valid.all()
    # the only query position is the trailing entity token
    assert b.query_mask.sum() == 1
    assert b.query_mask[0, 8]
    # its wake target is the latest value
    assert b.targets[0, 8] == ep.queries[0].gold
    # first update block is superseded by the second
    np.testing.assert_array_equal(b.keep_labels[0, 1:4], 0.0)
    np.testing.assert_array_equal(b.keep_labels[0, 4:7], 1.0)


def test_pack_pads_to_longest():
    eps = [data_mod.gen_pi_episode(d, stream_rng(0, "data", 1)) for d in (1, 3)]
    b = tr.pack(eps)
    assert b.tokens.shape == (2, 12)
    assert b.lengths.tolist() == [6, 12]
    assert not b.valid[0, 6:].any()
    assert (b.tokens[0, 6:] == data_mod.PAD).all()


def test_make_batches_partitions_everything():
    rng = stream_rng(0, "data", 2)
    eps = tr.sample_epoch(rng, 50, 5)
    batches = tr.make_batches(eps, 16, rng)
    assert sum(len(b.episodes) for b in batches) == 50
    assert all(len(b.episodes) <= 16 for b in batches)
    # length bucketing: every batch is padded to its own longest member only
    for b in batches:
        assert b.tokens.shape[1] == max(len(e) for e in b.episodes)


def test_sample_epoch_respects_cap():
    rng = stream_rng(0, "data", 3)
    eps = tr.sample_epoch(rng, 200, 4)
    depths = {e.depth for e in eps}
    assert depths <= {1, 2, 3, 4}
    assert depths == {1, 2, 3, 4}       # all depths show up in 200 draws
    assert all(e.kind == "pi" for e in eps)


def test_probe_episodes_cycle_eval_depths():
    eps = tr.probe_episodes(0, count=14)
    assert [e.depth for e in eps] == list(data_mod.EVAL_DEPTHS) * 2


# ---------------------------------------------------------------------------
# stage loops


def _small_hp():
    return HyperParams(epochs_stage0=1, epochs_stage1=1, epochs_stage2=1,
                       baseline_epochs=1, episodes_per_epoch=24, batch_size=8,
                       probe_episodes=7, max_depth=6)


def test_wake_epoch_touches_only_model_params(tmp_path):
    params = sy.init_system_params(CFG, 3)
    before = {k: v.data.copy() for k, v in params.items()}
    hp = _small_hp()
    rng = stream_rng(3, "data", 0)
    batches = tr.make_batches(tr.sample_epoch(rng, 8, 3), 8, rng)
    opt = tr.AdamW(sy.select(params, "model"), hp.learning_rate)
    losses = tr.run_wake_epoch(params, CFG, hp, batches, opt, tmp_path, {})
    assert losses["n_episodes"] == 8
    assert losses["sleep"] == 0.0
    for k, v in params.items():
        if k.startswith("model."):
            continue
        np.testing.assert_array_equal(v.data, before[k], err_msg=k)
    assert not np.array_equal(params["model.tok_emb"].data, before["model.tok_emb"])


def test_divergence_dumps_state(tmp_path):
    params = sy.init_system_params(CFG, 4)
    with pytest.raises(tr.TrainingDiverged):
        tr._check_finite(float("nan"), params, tmp_path, {"stage": 0, "epoch": 1})
    assert (tmp_path / "diverged.sgc").exists()
    ctx = json.loads((tmp_path / "diverged.json").read_text())
    assert ctx["stage"] == 0


@pytest.mark.slow
def test_train_method_is_deterministic(tmp_path):
    hp = _small_hp()
    runs = []
    for name in ("a", "b"):
        tr.train_method("sleepgate", CFG, hp, 5, tmp_path / name)
        runs.append(md.load_checkpoint(tmp_path / name / "final.sgc"))
    assert runs[0].keys() == runs[1].keys()
    for k in runs[0]:
        np.testing.assert_array_equal(runs[0][k], runs[1][k], err_msg=k)
    for fname in ("config.txt", "runlog.jsonl", "stage0.sgc", "stage1.sgc",
                  "stage1_gate_holdout.json", "final.sgc"):
        assert (tmp_path / "a" / fname).exists(), fname
    records = [json.loads(l) for l in
               (tmp_path / "a" / "runlog.jsonl").read_text().splitlines()]
    assert len(records) == 3                       # one per epoch across stages
    assert [r["stage"] for r in records] == [0, 1, 2]
    assert records[2]["depth_cap"] == 5            # stage-2 epoch 1 cap


@pytest.mark.slow
def test_baseline_training_uses_policy_and_wake_only(tmp_path):
    hp = _small_hp()
    params = tr.train_method("window", CFG, hp, 6, tmp_path)
    records = [json.loads(l) for l in
               (tmp_path / "runlog.jsonl").read_text().splitlines()]
    assert len(records) == 1
    assert records[0]["method"] == "window"
    assert records[0]["sleep"] == 0.0 and records[0]["align"] == 0.0
    # additions stay at their initialization: only the model trains
    fresh = sy.init_system_params(CFG, 6)
    for k in params:
        if not k.startswith("model."):
            np.testing.assert_array_equal(params[k].data, fresh[k].data, err_msg=k)
