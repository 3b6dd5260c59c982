"""Comparison cache policies: what each method lets attention see.

Every policy reduces to per-step visibility over key positions, applied as
attention-score modifications shared by all layers and heads: evicted
positions get -inf added pre-softmax (exactly equivalent to removing them
from a physical cache), and age-decayed keys become multiplicative score
factors. The heavy-hitter policy needs the model's own attention scores, so
its mask is built by a sequential scan over the first layer's score rows.

Budgeted policies all keep 64 entries so the comparison is budget-fair:
a plain sliding window, the sink-plus-window streaming variant, and the
heavy-hitter policy split 32 recent + 32 by accumulated attention.
"""

from __future__ import annotations

import numpy as np

NEG_INF = float("-inf")
WINDOW_BUDGET = 64
SINK_COUNT = 4
SINK_WINDOW = 60
HEAVY_BUDGET = 32
RECENT_BUDGET = 32
DECAY_RATE = 0.01

METHODS = ("sleepgate", "full", "window", "h2o", "streaming", "decay")


class FullCache:
    name = "full"
    needs_scores = False

    def score_mods(self, t: int, lengths=None, scores=None):
        return None, None

    def retained(self, t: int) -> set:
        return set(range(t + 1))


class SlidingWindow:
    name = "window"
    needs_scores = False

    def __init__(self, budget: int = WINDOW_BUDGET):
        self.budget = budget

    def score_mods(self, t: int, lengths=None, scores=None):
        add = np.zeros((1, 1, t, t), dtype=np.float32)
        rows = np.arange(t)[:, None]
        cols = np.arange(t)[None, :]
        add[0, 0][cols < rows - (self.budget - 1)] = NEG_INF
        return add, None

    def retained(self, t: int) -> set:
        return set(range(max(0, t - self.budget + 1), t + 1))


class StreamingSinks:
    name = "streaming"
    needs_scores = False

    def __init__(self, sinks: int = SINK_COUNT, window: int = SINK_WINDOW):
        self.sinks = sinks
        self.window = window

    def score_mods(self, t: int, lengths=None, scores=None):
        add = np.zeros((1, 1, t, t), dtype=np.float32)
        rows = np.arange(t)[:, None]
        cols = np.arange(t)[None, :]
        dropped = (cols < rows - (self.window - 1)) & (cols >= self.sinks)
        add[0, 0][dropped] = NEG_INF
        return add, None

    def retained(self, t: int) -> set:
        kept = set(range(min(self.sinks, t + 1)))
        kept |= set(range(max(0, t - self.window + 1), t + 1))
        return kept


class DecayOnly:
    name = "decay"
    needs_scores = False

    def __init__(self, decay_rate: float = DECAY_RATE):
        self.decay_rate = decay_rate

    def score_mods(self, t: int, lengths=None, scores=None):
        ages = np.arange(t)[:, None] - np.arange(t)[None, :]
        mult = np.power(1.0 + np.maximum(ages, 0), -self.decay_rate).astype(np.float32)
        return None, mult[None, None]

    def retained(self, t: int) -> set:
        return set(range(t + 1))


def h2o_retained(t: int, cum_attn: np.ndarray,
                 heavy: int = HEAVY_BUDGET, recent: int = RECENT_BUDGET) -> set:
    """Visibility at step t: the last `recent` positions plus the `heavy`
    highest-tally positions among the rest (ties: newer wins)."""
    if t + 1 <= heavy + recent:
        return set(range(t + 1))
    recent_set = set(range(t - recent + 1, t + 1))
    older = np.arange(t - recent + 1)
    order = np.lexsort((-older, -np.asarray(cum_attn)[older]))
    return recent_set | set(int(older[i]) for i in order[:heavy])


class HeavyHitter:
    name = "h2o"
    needs_scores = True

    def __init__(self, heavy: int = HEAVY_BUDGET, recent: int = RECENT_BUDGET):
        self.heavy = heavy
        self.recent = recent

    def score_mods(self, t: int, lengths=None, scores=None):
        """Sequential scan over first-layer score rows.

        scores: (B, H, T, T) raw pre-softmax values without the causal mask;
        each row's attention is computed under this policy's own visibility
        before its tallies feed the next row's decision.
        """
        if scores is None:
            raise ValueError("heavy-hitter policy needs first-layer scores")
        b, h, tt, _ = scores.shape
        if lengths is None:
            lengths = np.full(b, tt, dtype=np.int64)
        add = np.zeros((b, 1, tt, tt), dtype=np.float32)
        for bi in range(b):
            tally = np.zeros(tt, dtype=np.float64)
            for step in range(int(lengths[bi])):
                kept = h2o_retained(step, tally, self.heavy, self.recent)
                row_mask = np.full(tt, NEG_INF, dtype=np.float32)
                row_mask[sorted(kept)] = 0.0
                add[bi, 0, step] = row_mask
                masked = scores[bi, :, step, :step + 1] + row_mask[None, :step + 1]
                masked = masked - masked.max(axis=-1, keepdims=True)
                expd = np.exp(masked)
                probs = expd / expd.sum(axis=-1, keepdims=True)
                tally[:step + 1] += probs.mean(axis=0)
            if lengths[bi] < tt:
                add[bi, 0, int(lengths[bi]):] = 0.0
        return add, None


def retained_set(policy, n_positions: int, cum_attention: np.ndarray | None = None,
                 step: int | None = None) -> set:
    """Positions visible at `step` (default: the last one)."""
    t = n_positions - 1 if step is None else step
    if isinstance(policy, HeavyHitter):
        if cum_attention is None:
            raise ValueError("heavy-hitter retention needs cumulative attention")
        return h2o_retained(t, cum_attention, policy.heavy, policy.recent)
    return policy.retained(t)


def make_policy(method: str):
    """Policy instance for a method name; None for methods without one."""
    table = {
        "full": FullCache,
        "window": SlidingWindow,
        "streaming": StreamingSinks,
        "decay": DecayOnly,
        "h2o": HeavyHitter,
    }
    if method == "sleepgate":
        return None
    if method not in table:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return table[method]()
