"""Finite-difference verification of every differentiable kernel.

Each named check builds a small deterministic input and compares the tape's
gradients against float64 central differences at relative tolerance 1e-3.
The final check drives the sleep path end to end: signatures from keys,
gate features, retention, log bias, biased attention, and the biased
cross-entropy, differentiated back to the keys and the tagger/gate weights.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import cache as cache_mod
from . import gate as gate_mod
from .autograd import Tensor
from .model import causal_mask


def _rng() -> np.random.Generator:
    return np.random.default_rng(20240917)


def _weighted_sum(out: Tensor) -> Tensor:
    # deterministic weights (a pure function of shape) so the scalarized
    # objective is identical across gradcheck's repeated evaluations
    w = Tensor(np.random.default_rng(7).normal(0.0, 1.0, out.data.shape))
    return ag.tsum(ag.mul(out, w))


def _check(fn, shapes, *, positive=False, max_coords=None):
    rng = _rng()
    inputs = []
    for s in shapes:
        x = rng.normal(0.0, 1.0, s)
        inputs.append(np.abs(x) + 0.5 if positive else x)
    return ag.gradcheck(fn, inputs, max_coords=max_coords, rng=_rng())


def check_add():
    return _check(lambda a, b: _weighted_sum(ag.add(a, b)), [(3, 4), (4,)])


def check_sub():
    return _check(lambda a, b: _weighted_sum(ag.sub(a, b)), [(3, 4), (3, 4)])


def check_mul():
    return _check(lambda a, b: _weighted_sum(ag.mul(a, b)), [(2, 3, 4), (4,)])


def check_scale():
    return _check(lambda a: _weighted_sum(ag.scale(a, -1.7)), [(3, 5)])


def check_matmul():
    return _check(lambda a, b: _weighted_sum(ag.matmul(a, b)), [(3, 4), (4, 5)])


def check_matmul_batched():
    return _check(lambda a, b: _weighted_sum(ag.matmul(a, b)),
                  [(2, 2, 3, 4), (2, 2, 4, 3)])


def check_reshape():
    return _check(lambda a: _weighted_sum(ag.reshape(a, (2, 6))), [(3, 4)])


def check_swapaxes():
    return _check(lambda a: _weighted_sum(ag.swapaxes(a, 1, 2)), [(2, 3, 4)])


def check_concat():
    return _check(lambda a, b: _weighted_sum(ag.concat([a, b], axis=-1)),
                  [(2, 3), (2, 2)])


def check_gather_rows():
    idx = np.array([[0, 2], [2, 1]])
    return _check(lambda a: _weighted_sum(ag.gather_rows(a, idx)), [(3, 4)])


def check_expand():
    return _check(lambda a: _weighted_sum(ag.expand(a, 1, 3)), [(2, 1, 4)])


def check_gelu():
    return _check(lambda a: _weighted_sum(ag.gelu(a)), [(3, 4)])


def check_sigmoid():
    return _check(lambda a: _weighted_sum(ag.sigmoid(a)), [(3, 4)])


def check_exp():
    return _check(lambda a: _weighted_sum(ag.exp(a)), [(3, 4)])


def check_log():
    return _check(lambda a: _weighted_sum(ag.log(a)), [(3, 4)], positive=True)


def check_clamp_min():
    # keep inputs away from the kink at the floor
    return _check(lambda a: _weighted_sum(ag.clamp_min(a, 0.05)), [(4, 4)],
                  positive=True)


def check_clamp():
    return _check(lambda a: _weighted_sum(ag.clamp(a, 0.05, 9.0)), [(4, 4)],
                  positive=True)


def check_tsum():
    return _check(lambda a: _weighted_sum(ag.tsum(a, axis=1)), [(2, 3, 4)])


def check_mean():
    return _check(lambda a: ag.mean(a), [(3, 5)])


def check_masked_mean():
    mask = np.array([[1, 0, 1], [0, 1, 1]], dtype=bool)
    return _check(lambda a: ag.masked_mean(a, mask), [(2, 3)])


def check_layernorm():
    return _check(lambda a, g, s: _weighted_sum(ag.layernorm(a, g, s)),
                  [(2, 3, 8), (8,), (8,)])


def check_softmax():
    return _check(lambda a: _weighted_sum(ag.softmax(a, causal_mask(4)[0, 0])),
                  [(3, 4, 4)])


def check_softmax_with_bias():
    mult = np.abs(_rng().normal(1.0, 0.1, (1, 1, 4, 4))).astype(np.float64)

    def fn(logits, bias):
        b4 = ag.reshape(bias, (1, 1, 1, 4))
        return _weighted_sum(ag.softmax_with_bias(logits, b4, causal_mask(4), mult))

    return _check(fn, [(1, 2, 4, 4), (1, 4)])


def check_cross_entropy():
    targets = np.array([[1, 3, 0]])
    mask = np.array([[True, True, False]])
    return _check(lambda lg: ag.cross_entropy(lg, targets, mask), [(1, 3, 5)])


def check_sleep_path():
    """keys -> signatures -> gate features -> retention -> bias -> biased
    attention -> cross-entropy, differentiated to keys and all weights."""
    rng = _rng()
    t, d, sd, vocab = 5, 128, 64, 11
    values = Tensor(rng.normal(0.0, 1.0, (1, t, d)))
    scores = Tensor(rng.normal(0.0, 1.0, (1, 1, t, t)))
    v_heads = Tensor(rng.normal(0.0, 1.0, (1, 1, t, d // 4)))
    w_out = Tensor(rng.normal(0.0, 0.2, (d // 4, vocab)))
    ages = np.arange(t)[::-1].copy()[None]
    sigma = np.zeros((1, t), dtype=bool)
    cum = np.abs(rng.normal(0.0, 1.0, (1, t)))
    targets = rng.integers(0, vocab, (1, t))
    mask = np.ones((1, t), dtype=bool)

    def fn(keys, w_s, w1, w_r):
        tagger = {"tagger.w_s": w_s,
                  "tagger.b_s": Tensor(np.zeros(sd)),
                  "tagger.ln.gain": Tensor(np.ones(sd)),
                  "tagger.ln.shift": Tensor(np.zeros(sd))}
        gate_params = {"gate.w1": w1,
                       "gate.b1": Tensor(np.zeros(gate_mod.GATE_HIDDEN)),
                       "gate.w_r": w_r,
                       "gate.b_r": Tensor(np.zeros(1))}
        sigs = cache_mod.signatures(tagger, keys)
        feats = gate_mod.assemble_features(keys, values, sigs, ages, sigma, cum)
        r = gate_mod.retention(gate_params, feats)
        bias = gate_mod.soft_bias(r)
        attn = ag.softmax_with_bias(scores, ag.reshape(bias, (1, 1, 1, t)),
                                    causal_mask(t))
        ctx = ag.reshape(ag.matmul(attn, v_heads), (1, t, d // 4))
        logits = ag.matmul(ctx, w_out)
        return ag.cross_entropy(logits, targets, mask)

    rng2 = _rng()
    inputs = [rng2.normal(0.0, 1.0, (1, t, d)),
              rng2.normal(0.0, 0.1, (2 * d, sd)),
              rng2.normal(0.0, 0.1, (gate_mod.FEATURE_WIDTH, gate_mod.GATE_HIDDEN)),
              rng2.normal(0.0, 0.1, (gate_mod.GATE_HIDDEN, 1))]
    return ag.gradcheck(fn, inputs, max_coords=6, rng=_rng())


CHECKS = [
    ("add", check_add),
    ("sub", check_sub),
    ("mul", check_mul),
    ("scale", check_scale),
    ("matmul", check_matmul),
    ("matmul-batched", check_matmul_batched),
    ("reshape", check_reshape),
    ("swapaxes", check_swapaxes),
    ("concat", check_concat),
    ("gather-rows", check_gather_rows),
    ("expand", check_expand),
    ("gelu", check_gelu),
    ("sigmoid", check_sigmoid),
    ("exp", check_exp),
    ("log", check_log),
    ("clamp-min", check_clamp_min),
    ("clamp", check_clamp),
    ("sum", check_tsum),
    ("mean", check_mean),
    ("masked-mean", check_masked_mean),
    ("layernorm", check_layernorm),
    ("softmax", check_softmax),
    ("softmax-with-bias", check_softmax_with_bias),
    ("cross-entropy", check_cross_entropy),
    ("sleep-path-end-to-end", check_sleep_path),
]


def run_all() -> list[tuple[str, dict]]:
    return [(name, fn()) for name, fn in CHECKS]
