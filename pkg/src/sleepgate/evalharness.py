"""Evaluation: exact-match retrieval accuracy, stale-retrieval rate, slopes.

A method answers a query by argmax over next-token logits at the query's
entity position. The answer is correct only on exact match with the
entity's latest value; it is stale when it matches one of the entity's
earlier, superseded values. The interference slope is the least-squares
slope of accuracy against ln(depth): 0 means depth does not hurt at all.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as model_mod
from . import system as system_mod
from .autograd import Tensor, no_grad
from .config import ModelConfig

EVAL_BATCH = 50
SLOPE_NEAR_DEPTHS = (1, 2, 5, 10)


@dataclass
class QueryRecord:
    method: str
    depth: int
    kind: str
    seq_len: int
    predicted: int
    gold: int
    correct: bool
    stale: bool


def _pad_batch(episodes) -> tuple[np.ndarray, np.ndarray]:
    t = max(len(e) for e in episodes)
    toks = np.zeros((len(episodes), t), dtype=np.int64)
    lengths = np.empty(len(episodes), dtype=np.int64)
    for i, e in enumerate(episodes):
        toks[i, :len(e)] = e.tokens
        lengths[i] = len(e)
    return toks, lengths


def predict_batch(params: dict[str, Tensor], cfg: ModelConfig, episodes, *,
                  policy=None, biased: bool = False) -> np.ndarray:
    """Argmax token at every query position; (sum of query counts,) array."""
    toks, lengths = _pad_batch(episodes)
    with no_grad():
        fr = model_mod.forward(params, cfg, toks, policy=policy, lengths=lengths)
        logits = fr.logits
        if biased:
            gp = system_mod.run_gate_pass(params, cfg, fr, lengths)
            logits = model_mod.forward(params, cfg, toks, bias=gp.bias,
                                       lengths=lengths, reuse_kv=fr.kv).logits
    preds = []
    arr = logits.data
    for i, e in enumerate(episodes):
        for q in e.queries:
            preds.append(int(arr[i, q.position].argmax()))
    return np.asarray(preds, dtype=np.int64)


def evaluate(params: dict[str, Tensor], cfg: ModelConfig, episodes, method: str, *,
             policy=None, biased: bool = False,
             batch_size: int = EVAL_BATCH) -> list[QueryRecord]:
    """One record per query, deterministic given parameters and episodes."""
    by_len: dict[int, list] = {}
    for e in episodes:
        by_len.setdefault(len(e), []).append(e)
    records = []
    for _, group in sorted(by_len.items()):
        for lo in range(0, len(group), batch_size):
            chunk = group[lo:lo + batch_size]
            preds = predict_batch(params, cfg, chunk, policy=policy, biased=biased)
            pi = 0
            for e in chunk:
                for q in e.queries:
                    p = int(preds[pi])
                    pi += 1
                    correct = p == q.gold
                    stale = (not correct) and p in set(q.superseded_values)
                    records.append(QueryRecord(
                        method=method, depth=e.depth, kind=e.kind, seq_len=len(e),
                        predicted=p, gold=q.gold, correct=correct, stale=stale))
    return records


def wilson_interval(successes: int, n: int, z: float = 1.96) -> tuple[float, float]:
    """95% score interval for a binomial proportion."""
    if n == 0:
        return 0.0, 1.0
    phat = successes / n
    denom = 1 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = z * np.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


@dataclass
class CellSummary:
    method: str
    depth: int
    n: int
    accuracy: float
    acc_lo: float
    acc_hi: float
    stale_rate: float
    mean_seq_len: float


def summarize(records) -> list[CellSummary]:
    cells: dict[tuple, list] = {}
    for r in records:
        cells.setdefault((r.method, r.depth), []).append(r)
    out = []
    for (method, depth), rs in sorted(cells.items()):
        n = len(rs)
        correct = sum(r.correct for r in rs)
        lo, hi = wilson_interval(correct, n)
        out.append(CellSummary(
            method=method, depth=depth, n=n, accuracy=correct / n,
            acc_lo=lo, acc_hi=hi, stale_rate=sum(r.stale for r in rs) / n,
            mean_seq_len=float(np.mean([r.seq_len for r in rs]))))
    return out


def pi_slope(accuracy_by_depth: dict[int, float]) -> float:
    """OLS slope of accuracy against ln(depth); needs at least two depths."""
    if len(accuracy_by_depth) < 2:
        raise ValueError("slope needs at least two depths")
    depths = sorted(accuracy_by_depth)
    x = np.log(np.asarray(depths, dtype=np.float64))
    y = np.asarray([accuracy_by_depth[d] for d in depths], dtype=np.float64)
    xc = x - x.mean()
    return float((xc * (y - y.mean())).sum() / (xc * xc).sum())


def method_slopes(cells: list[CellSummary]) -> list[dict]:
    """Per-method slopes: over depths <= 10 and over every depth present."""
    by_method: dict[str, dict[int, float]] = {}
    for c in cells:
        by_method.setdefault(c.method, {})[c.depth] = c.accuracy
    rows = []
    for method in sorted(by_method):
        acc = by_method[method]
        near = {d: a for d, a in acc.items() if d <= 10}
        rows.append({
            "method": method,
            "slope_near": pi_slope(near) if len(near) >= 2 else float("nan"),
            "slope_all": pi_slope(acc) if len(acc) >= 2 else float("nan"),
        })
    return rows


RESULT_FIELDS = ("method", "depth", "n_episodes", "accuracy", "acc_lo", "acc_hi",
                 "stale_rate", "mean_seq_len")


def write_results_csv(cells: list[CellSummary], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(RESULT_FIELDS)
        for c in cells:
            w.writerow([c.method, c.depth, c.n, f"{c.accuracy:.6f}", f"{c.acc_lo:.6f}",
                        f"{c.acc_hi:.6f}", f"{c.stale_rate:.6f}", f"{c.mean_seq_len:.2f}"])


def read_results_csv(path) -> list[CellSummary]:
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            out.append(CellSummary(
                method=row["method"], depth=int(row["depth"]), n=int(row["n_episodes"]),
                accuracy=float(row["accuracy"]), acc_lo=float(row["acc_lo"]),
                acc_hi=float(row["acc_hi"]), stale_rate=float(row["stale_rate"]),
                mean_seq_len=float(row["mean_seq_len"])))
    return out


def emit_report(cells: list[CellSummary], out_dir) -> dict[str, Path]:
    """results.csv + slopes.csv + plotdata.csv; warns on an incomplete grid."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    methods = sorted({c.method for c in cells})
    depths = sorted({c.depth for c in cells})
    have = {(c.method, c.depth) for c in cells}
    missing = [(m, d) for m in methods for d in depths if (m, d) not in have]
    if missing:
        warnings.warn(f"incomplete method x depth grid; missing cells: {missing}")

    paths = {"results": out_dir / "results.csv",
             "slopes": out_dir / "slopes.csv",
             "plotdata": out_dir / "plotdata.csv"}
    write_results_csv(cells, paths["results"])

    with open(paths["slopes"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["method", "slope_depths_1_10", "slope_all_depths"])
        for row in method_slopes(cells):
            w.writerow([row["method"], f"{row['slope_near']:.6f}", f"{row['slope_all']:.6f}"])

    acc = {(c.method, c.depth): c.accuracy for c in cells}
    with open(paths["plotdata"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["depth"] + methods)
        for d in depths:
            w.writerow([d] + [f"{acc[(m, d)]:.6f}" if (m, d) in acc else "" for m in methods])
    return paths
