"""Losses, optimizer, and the staged training loops.

The objective has four parts: next-token cross-entropy on unbiased logits
(wake), query cross-entropy on soft-biased logits (sleep), the mean
retention score (a pressure to forget), and a binary cross-entropy aligning
retention with the tagger's supersession flags. The gated model trains in
three stages under one 45-epoch budget: 10 epochs of wake-only warm-up,
5 epochs of gate-only training against generator ground truth, then 30
joint epochs with a depth curriculum. Each baseline trains its own model
for the same 45 epochs with wake loss only and its cache policy active.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import data as data_mod
from . import evalharness as eval_mod
from . import gate as gate_mod
from . import model as model_mod
from . import system as system_mod
from .autograd import Tensor
from .baselines import make_policy
from .config import HyperParams, ModelConfig, save_config, stream_rng

ALIGN_CLAMP = 1e-7


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# loss terms


def wake_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean next-token NLL on unbiased logits over masked positions."""
    return ag.cross_entropy(logits, targets, mask)


def sleep_loss(biased_logits: Tensor, targets: np.ndarray, query_mask: np.ndarray) -> Tensor:
    """Mean NLL of gold values at query positions, on soft-biased logits."""
    return ag.cross_entropy(biased_logits, targets, query_mask)


def compress_loss(retentions: Tensor, mask: np.ndarray) -> Tensor:
    """Mean retention: the pressure that keeps the cache from hoarding."""
    return ag.masked_mean(retentions, mask)


def align_loss(retentions: Tensor, keep_targets: np.ndarray, mask: np.ndarray,
               clamp: float = ALIGN_CLAMP) -> Tensor:
    """BCE between retention and keep targets (1 = not superseded)."""
    y = keep_targets.astype(np.float32)
    r = ag.clamp(retentions, clamp, 1.0 - clamp)
    ll = ag.add(ag.mul(Tensor(y), ag.log(r)),
                ag.mul(Tensor(1.0 - y), ag.log(ag.sub(ag.tensor(np.float32(1.0)), r))))
    return ag.scale(ag.masked_mean(ll, mask), -1.0)


def total_loss(wake: Tensor, sleep: Tensor, compress: Tensor, align: Tensor,
               hp: HyperParams) -> Tensor:
    out = ag.add(wake, ag.scale(sleep, hp.sleep_loss_weight))
    out = ag.add(out, ag.scale(compress, hp.compress_loss_weight))
    return ag.add(out, ag.scale(align, hp.align_loss_weight))


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Decoupled weight decay; moments in float32, state per parameter."""

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    tokens: np.ndarray        # (B, T) right-padded
    lengths: np.ndarray       # (B,)
    targets: np.ndarray       # (B, T) next-token, gold at query positions
    valid: np.ndarray         # (B, T) bool, real (non-pad) positions
    query_mask: np.ndarray    # (B, T) bool, query entity positions
    keep_labels: np.ndarray   # (B, T) float, ground truth 1 = not superseded
    episodes: list = field(repr=False, default_factory=list)


def pack(episodes) -> Batch:
    b = len(episodes)
    t = max(len(e) for e in episodes)
    tokens = np.zeros((b, t), dtype=np.int64)
    lengths = np.empty(b, dtype=np.int64)
    targets = np.zeros((b, t), dtype=np.int64)
    valid = np.zeros((b, t), dtype=bool)
    qmask = np.zeros((b, t), dtype=bool)
    keep = np.ones((b, t), dtype=np.float32)
    for i, e in enumerate(episodes):
        n = len(e)
        tokens[i, :n] = e.tokens
        lengths[i] = n
        targets[i, :n] = e.wake_targets()
        valid[i, :n] = True
        for q in e.queries:
            qmask[i, q.position] = True
        keep[i, :n] = ~e.superseded_mask()
    return Batch(tokens, lengths, targets, valid, qmask, keep, list(episodes))


def make_batches(episodes, batch_size: int, rng: np.random.Generator) -> list[Batch]:
    """Length-bucketed batches in a shuffled order (keeps padding small)."""
    ordered = sorted(episodes, key=len)
    chunks = [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]
    rng.shuffle(chunks)
    return [pack(c) for c in chunks]


def sample_epoch(rng: np.random.Generator, count: int, depth_cap: int) -> list:
    """Fresh single-entity update streams, depth uniform on [1, depth_cap]."""
    return [data_mod.gen_pi_episode(int(rng.integers(1, depth_cap + 1)), rng)
            for _ in range(count)]


# ---------------------------------------------------------------------------
# run bookkeeping


class RunLogger:
    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def log(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def _check_finite(loss_value: float, params: dict[str, Tensor], out_dir: Path,
                  context: dict) -> None:
    if np.isfinite(loss_value):
        return
    dump = Path(out_dir) / "diverged.sgc"
    model_mod.save_checkpoint(params, dump)
    (Path(out_dir) / "diverged.json").write_text(json.dumps(context, sort_keys=True))
    raise TrainingDiverged(f"non-finite loss {loss_value} at {context}; state in {dump}")


def _gate_accuracy(r: np.ndarray, keep_labels: np.ndarray, valid: np.ndarray) -> tuple[int, int]:
    pred_keep = r >= 0.5
    hits = int(((pred_keep == (keep_labels >= 0.5)) & valid).sum())
    return hits, int(valid.sum())


def probe_episodes(root_seed: int, count: int = 50) -> list:
    """Fixed dev probe: depths cycle through the evaluation grid."""
    rng = stream_rng(root_seed, "probe")
    depths = data_mod.EVAL_DEPTHS
    return [data_mod.gen_pi_episode(depths[i % len(depths)], rng) for i in range(count)]


def _probe_accuracy(params, cfg, episodes, policy, biased) -> float:
    records = eval_mod.evaluate(params, cfg, episodes, "probe", policy=policy, biased=biased)
    return sum(r.correct for r in records) / len(records)


# ---------------------------------------------------------------------------
# epoch loops


def run_wake_epoch(params, cfg: ModelConfig, hp: HyperParams, batches, opt: AdamW,
                   out_dir: Path, context: dict, policy=None) -> dict:
    """One epoch of plain language-model training (stage 0 and baselines)."""
    tot, n = 0.0, 0
    for batch in batches:
        opt.zero_grad()
        fr = model_mod.forward(params, cfg, batch.tokens, policy=policy,
                               lengths=batch.lengths, layernorm_eps=hp.layernorm_eps)
        loss = wake_loss(fr.logits, batch.targets, batch.valid)
        val = float(loss.data)
        _check_finite(val, params, out_dir, {**context, "loss": val})
        loss.backward()
        opt.step()
        tot += val * len(batch.episodes)
        n += len(batch.episodes)
    avg = tot / n
    return {"wake": avg, "sleep": 0.0, "compress": 0.0, "align": 0.0,
            "total": avg, "n_episodes": n}


def run_gate_epoch(params, cfg: ModelConfig, hp: HyperParams, batches, opt: AdamW,
                   out_dir: Path, context: dict) -> dict:
    """One epoch of gate-only training against generator supersession labels.

    The frozen base and tagger provide features; their forward runs without
    a graph and the features re-enter as constants, so only gate parameters
    receive gradients.
    """
    tot, n = 0.0, 0
    hits, seen = 0, 0
    gate_params = system_mod.select(params, "gate")
    for batch in batches:
        opt.zero_grad()
        with ag.no_grad():
            fr = model_mod.forward(params, cfg, batch.tokens, lengths=batch.lengths,
                                   layernorm_eps=hp.layernorm_eps)
            feats, _, _, _ = system_mod.gate_features(params, cfg, fr, batch.lengths,
                                                      hp.conflict_threshold)
        r = gate_mod.retention(gate_params, Tensor(feats.data))
        loss = align_loss(r, batch.keep_labels, batch.valid, hp.align_clamp)
        val = float(loss.data)
        _check_finite(val, params, out_dir, {**context, "loss": val})
        loss.backward()
        opt.step()
        h, s = _gate_accuracy(r.data, batch.keep_labels, batch.valid)
        hits += h
        seen += s
        tot += val * len(batch.episodes)
        n += len(batch.episodes)
    return {"wake": 0.0, "sleep": 0.0, "compress": 0.0, "align": tot / n,
            "total": tot / n, "n_episodes": n, "gate_acc": hits / seen}


def run_joint_epoch(params, cfg: ModelConfig, hp: HyperParams, batches, opt: AdamW,
                    out_dir: Path, context: dict) -> dict:
    """One Stage-2 epoch: unbiased + biased passes, all four loss terms."""
    sums = {"wake": 0.0, "sleep": 0.0, "compress": 0.0, "align": 0.0, "total": 0.0}
    n = 0
    hits, seen = 0, 0
    for batch in batches:
        opt.zero_grad()
        fr = model_mod.forward(params, cfg, batch.tokens, lengths=batch.lengths,
                               layernorm_eps=hp.layernorm_eps)
        gp = system_mod.run_gate_pass(params, cfg, fr, batch.lengths,
                                      conflict_threshold=hp.conflict_threshold,
                                      beta=hp.bias_scale)
        fr_b = model_mod.forward(params, cfg, batch.tokens, bias=gp.bias,
                                 lengths=batch.lengths, reuse_kv=fr.kv,
                                 layernorm_eps=hp.layernorm_eps)
        l_wake = wake_loss(fr.logits, batch.targets, batch.valid)
        l_sleep = sleep_loss(fr_b.logits, batch.targets, batch.query_mask)
        l_comp = compress_loss(gp.retention, batch.valid)
        l_align = align_loss(gp.retention, (~gp.sigma).astype(np.float32),
                             batch.valid, hp.align_clamp)
        loss = total_loss(l_wake, l_sleep, l_comp, l_align, hp)
        val = float(loss.data)
        _check_finite(val, params, out_dir, {**context, "loss": val})
        loss.backward()
        opt.step()
        h, s = _gate_accuracy(gp.retention.data, batch.keep_labels, batch.valid)
        hits += h
        seen += s
        k = len(batch.episodes)
        for name, term in (("wake", l_wake), ("sleep", l_sleep),
                           ("compress", l_comp), ("align", l_align), ("total", loss)):
            sums[name] += float(term.data) * k
        n += k
    out = {name: v / n for name, v in sums.items()}
    out["n_episodes"] = n
    out["gate_acc"] = hits / seen
    return out


# ---------------------------------------------------------------------------
# full runs


def gate_holdout_accuracy(params, cfg: ModelConfig, hp: HyperParams, root_seed: int,
                          n_episodes: int = 2000) -> float:
    """Gate label accuracy on fresh interference episodes (0.5 cutoff)."""
    rng = stream_rng(root_seed, "eval", 9)
    episodes = sample_epoch(rng, n_episodes, hp.max_depth)
    hits, seen = 0, 0
    for lo in range(0, len(episodes), 100):
        batch = pack(episodes[lo:lo + 100])
        with ag.no_grad():
            fr = model_mod.forward(params, cfg, batch.tokens, lengths=batch.lengths,
                                   layernorm_eps=hp.layernorm_eps)
            gp = system_mod.run_gate_pass(params, cfg, fr, batch.lengths,
                                          conflict_threshold=hp.conflict_threshold,
                                          beta=hp.bias_scale)
        h, s = _gate_accuracy(gp.retention.data, batch.keep_labels, batch.valid)
        hits += h
        seen += s
    return hits / seen


def train_method(method: str, cfg: ModelConfig, hp: HyperParams, root_seed: int,
                 out_dir) -> dict[str, Tensor]:
    """Train one method end to end, logging one record per epoch.

    sleepgate: stage 0 (wake, model only) -> stage 1 (gate only, ground
    truth labels) -> stage 2 (joint, depth curriculum). Baselines: 45
    wake-only epochs with their cache policy active. Returns final params.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(out_dir / "config.txt", cfg, hp)
    logger = RunLogger(out_dir / "runlog.jsonl")
    params = system_mod.init_system_params(cfg, root_seed)
    probes = probe_episodes(root_seed, hp.probe_episodes)
    policy = make_policy(method)
    is_gated = method == "sleepgate"
    global_epoch = 0

    def log_epoch(stage, stage_epoch, losses, depth_cap, started, extra=None):
        record = {"method": method, "stage": stage, "epoch": global_epoch,
                  "stage_epoch": stage_epoch, "depth_cap": depth_cap,
                  "seconds": round(time.monotonic() - started, 3), **losses}
        if extra:
            record.update(extra)
        logger.log(record)

    if is_gated:
        opt = AdamW(system_mod.select(params, "model"), hp.learning_rate,
                    hp.adam_beta1, hp.adam_beta2, hp.adam_eps, hp.weight_decay)
        for ep in range(1, hp.epochs_stage0 + 1):
            global_epoch += 1
            started = time.monotonic()
            rng = stream_rng(root_seed, "data", global_epoch)
            episodes = sample_epoch(rng, hp.episodes_per_epoch, hp.max_depth)
            losses = run_wake_epoch(params, cfg, hp, make_batches(episodes, hp.batch_size, rng),
                                    opt, out_dir, {"stage": 0, "epoch": ep})
            losses["probe_acc"] = _probe_accuracy(params, cfg, probes, None, False)
            log_epoch(0, ep, losses, hp.max_depth, started)
        model_mod.save_checkpoint(params, out_dir / "stage0.sgc")

        opt = AdamW(system_mod.select(params, "gate"), hp.learning_rate,
                    hp.adam_beta1, hp.adam_beta2, hp.adam_eps, hp.weight_decay)
        for ep in range(1, hp.epochs_stage1 + 1):
            global_epoch += 1
            started = time.monotonic()
            rng = stream_rng(root_seed, "data", global_epoch)
            episodes = sample_epoch(rng, hp.episodes_per_epoch, hp.max_depth)
            losses = run_gate_epoch(params, cfg, hp, make_batches(episodes, hp.batch_size, rng),
                                    opt, out_dir, {"stage": 1, "epoch": ep})
            losses["probe_acc"] = _probe_accuracy(params, cfg, probes, None, False)
            extra = None
            if ep == hp.epochs_stage1:
                holdout = gate_holdout_accuracy(params, cfg, hp, root_seed)
                extra = {"gate_holdout_acc": holdout}
                (out_dir / "stage1_gate_holdout.json").write_text(
                    json.dumps({"gate_holdout_acc": holdout, "episodes": 2000}))
            log_epoch(1, ep, losses, hp.max_depth, started, extra=extra)
        model_mod.save_checkpoint(params, out_dir / "stage1.sgc")

        trainable = system_mod.select(params, "model", "tagger", "gate")
        opt = AdamW(trainable, hp.learning_rate, hp.adam_beta1, hp.adam_beta2,
                    hp.adam_eps, hp.weight_decay)
        for ep in range(1, hp.epochs_stage2 + 1):
            global_epoch += 1
            started = time.monotonic()
            cap = hp.stage2_depth_cap(ep)
            rng = stream_rng(root_seed, "data", global_epoch)
            episodes = sample_epoch(rng, hp.episodes_per_epoch, cap)
            losses = run_joint_epoch(params, cfg, hp, make_batches(episodes, hp.batch_size, rng),
                                     opt, out_dir, {"stage": 2, "epoch": ep})
            losses["probe_acc"] = _probe_accuracy(params, cfg, probes, None, True)
            log_epoch(2, ep, losses, cap, started)
    else:
        opt = AdamW(system_mod.select(params, "model"), hp.learning_rate,
                    hp.adam_beta1, hp.adam_beta2, hp.adam_eps, hp.weight_decay)
        for ep in range(1, hp.baseline_epochs + 1):
            global_epoch += 1
            started = time.monotonic()
            rng = stream_rng(root_seed, "data", global_epoch)
            episodes = sample_epoch(rng, hp.episodes_per_epoch, hp.max_depth)
            losses = run_wake_epoch(params, cfg, hp, make_batches(episodes, hp.batch_size, rng),
                                    opt, out_dir, {"stage": 0, "epoch": ep}, policy=policy)
            losses["probe_acc"] = _probe_accuracy(params, cfg, probes, policy, False)
            log_epoch(0, ep, losses, hp.max_depth, started)

    model_mod.save_checkpoint(params, out_dir / "final.sgc")
    return params
