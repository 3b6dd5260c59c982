"""Empirical checks of the stale-survivor bound and cache-size arithmetic.

A single entity receives n sequential updates; every update makes all
earlier ones stale. A cleanup cycle fires after every N-th update and
evicts each currently stale entry independently with probability p_c. The
analytic claim bounds the expected number of stale survivors at the end by
min(N, eps*n / (1 - (1-p_c)^(n/N))) with eps = 1 - p_c. The Monte-Carlo
simulation below is the literal process; a bootstrap over trial outcomes
decides whether the observed mean is statistically above the bound.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import stream_rng

DEFAULT_PCS = (0.5, 0.7, 0.9, 0.99)
DEFAULT_NS = (8, 32, 128)
DEFAULT_UPDATE_COUNTS = (64, 256, 1024)
BOOTSTRAP_RESAMPLES = 1000
BOOTSTRAP_CONFIDENCE = 0.99
FLATNESS_SLOPE_LIMIT = 0.01


def uniform_retrieval(n: int) -> float:
    """Retrieval probability under depth-n interference without gating."""
    if n < 1:
        raise ValueError(f"update count must be >= 1, got {n}")
    return 1.0 / n


def stale_bound(p_c: float, cycle_interval: int, n_updates: int) -> float:
    """min(N, eps*n / (1 - (1-p_c)^(n/N))), eps = 1 - p_c.

    The exponent is the number of cycles the process actually runs,
    floor(n/N); the smooth n/N form is only meaningful when N divides n,
    and with zero cycles the survivor count is trivially under N because
    fewer than N updates have arrived.
    """
    eps = 1.0 - p_c
    cycles = n_updates // cycle_interval
    decay = 1.0 - (1.0 - p_c) ** cycles
    if decay <= 0.0:
        return float(cycle_interval)
    return float(min(cycle_interval, eps * n_updates / decay))


def simulate_stale_survival(p_c: float, cycle_interval: int, n_updates: int,
                            trials: int, rng: np.random.Generator) -> np.ndarray:
    """Per-trial stale survivor counts after n updates.

    Literal process: update t arrives (making entry t-1 stale); whenever
    t is a multiple of the cycle interval, every stale entry is evicted
    independently with probability p_c. The current entry is never touched.
    """
    if not 0.0 <= p_c <= 1.0:
        raise ValueError("gate correctness must lie in [0, 1]")
    if cycle_interval < 1 or n_updates < 1 or trials < 1:
        raise ValueError("cycle interval, update count, and trials must be >= 1")
    stale = np.zeros((trials, n_updates), dtype=bool)
    for t in range(1, n_updates + 1):
        if t >= 2:
            stale[:, t - 2] = True
        if t % cycle_interval == 0 and t >= 2:
            live = stale[:, :t - 1]
            live &= rng.random(live.shape) > p_c
    return stale.sum(axis=1)


def bootstrap_exceeds(survivors: np.ndarray, bound: float,
                      rng: np.random.Generator,
                      resamples: int = BOOTSTRAP_RESAMPLES,
                      confidence: float = BOOTSTRAP_CONFIDENCE) -> dict:
    """Bootstrap the trial mean against the bound.

    The point fails only when even the low tail of resampled means clears
    the bound, i.e. we are `confidence`-sure the true mean exceeds it.
    """
    counts = survivors.astype(np.float64)
    idx = rng.integers(0, len(counts), size=(resamples, len(counts)))
    means = counts[idx].mean(axis=1)
    low_tail = float(np.quantile(means, 1.0 - confidence))
    frac_below = float((means <= bound).mean())
    return {
        "mc_mean": float(counts.mean()),
        "bound": bound,
        "violates": low_tail > bound,
        "low_tail_mean": low_tail,
        "frac_resamples_below": frac_below,
    }


@dataclass
class GridPoint:
    p_c: float
    cycle_interval: int
    n_updates: int
    trials: int
    mc_mean: float
    bound: float
    violates: bool
    frac_resamples_below: float


def run_grid(root_seed: int, trials: int = 10000,
             p_cs=DEFAULT_PCS, intervals=DEFAULT_NS,
             update_counts=DEFAULT_UPDATE_COUNTS, jobs: int = 1) -> list[GridPoint]:
    points = [(p, big_n, n) for p in p_cs for big_n in intervals for n in update_counts]
    args = [(root_seed, i, p, big_n, n, trials) for i, (p, big_n, n) in enumerate(points)]
    if jobs > 1:
        from multiprocessing import Pool
        with Pool(jobs) as pool:
            rows = pool.map(_grid_point, args)
    else:
        rows = [_grid_point(a) for a in args]
    return rows


def _grid_point(arg) -> GridPoint:
    root_seed, index, p_c, big_n, n, trials = arg
    rng = stream_rng(root_seed, "theory", index)
    survivors = simulate_stale_survival(p_c, big_n, n, trials, rng)
    stats = bootstrap_exceeds(survivors, stale_bound(p_c, big_n, n), rng)
    return GridPoint(p_c=p_c, cycle_interval=big_n, n_updates=n, trials=trials,
                     mc_mean=stats["mc_mean"], bound=stats["bound"],
                     violates=stats["violates"],
                     frac_resamples_below=stats["frac_resamples_below"])


def flatness_slopes(rows: list[GridPoint], p_c: float = 0.99) -> dict[int, float]:
    """Signed OLS slope of mean survivors vs update count, per cycle interval."""
    out = {}
    by_interval: dict[int, list] = {}
    for r in rows:
        if r.p_c == p_c:
            by_interval.setdefault(r.cycle_interval, []).append(r)
    for big_n, pts in sorted(by_interval.items()):
        x = np.array([p.n_updates for p in pts], dtype=np.float64)
        y = np.array([p.mc_mean for p in pts], dtype=np.float64)
        xc = x - x.mean()
        out[big_n] = float((xc * (y - y.mean())).sum() / (xc * xc).sum())
    return out


def cache_bound(cycle_interval: float, f_e: float, c: float) -> float:
    """Steady-state cache-size bound N / (f_e + (1-f_e)(1-1/c)).

    Returns +inf when nothing is ever evicted or compressed (f_e=0, c=1).
    """
    if not 0.0 <= f_e <= 1.0:
        raise ValueError("eviction fraction must lie in [0, 1]")
    if c < 1.0:
        raise ValueError("compression ratio must be >= 1")
    denom = f_e + (1.0 - f_e) * (1.0 - 1.0 / c)
    if denom <= 0.0:
        return float("inf")
    return cycle_interval / denom


THEORY_FIELDS = ("p_c", "N", "n", "trials", "mc_mean", "bound",
                 "violates", "frac_resamples_below")


def write_theory_csv(rows: list[GridPoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(THEORY_FIELDS)
        for r in rows:
            w.writerow([r.p_c, r.cycle_interval, r.n_updates, r.trials,
                        f"{r.mc_mean:.6f}", f"{r.bound:.6f}",
                        int(r.violates), f"{r.frac_resamples_below:.4f}"])


def read_theory_csv(path) -> list[GridPoint]:
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            out.append(GridPoint(
                p_c=float(row["p_c"]), cycle_interval=int(row["N"]),
                n_updates=int(row["n"]), trials=int(row["trials"]),
                mc_mean=float(row["mc_mean"]), bound=float(row["bound"]),
                violates=bool(int(row["violates"])),
                frac_resamples_below=float(row["frac_resamples_below"])))
    return out
