"""Scoring, intervals, slopes, and the results file formats."""

import numpy as np
import pytest

from sleepgate import data as data_mod
from sleepgate import evalharness as ev
from sleepgate import system as sy
from sleepgate.config import ModelConfig, stream_rng

CFG = ModelConfig()


# ---------------------------------------------------------------------------
# record scoring


@pytest.fixture(scope="module")
def params():
    return sy.init_system_params(CFG, 21)


def test_evaluate_one_record_per_query(params):
    rng = stream_rng(21, "eval", 0)
    eps = [data_mod.gen_pi_episode(d, rng) for d in (1, 2, 2, 5)]
    records = ev.evaluate(params, CFG, eps, "m")
    assert len(records) == 4
    assert sorted(r.depth for r in records) == [1, 2, 2, 5]
    for r in records:
        assert r.method == "m"
        assert r.kind == "pi"
        assert r.correct == (r.predicted == r.gold)
        assert not (r.correct and r.stale)


def test_evaluate_batching_invariance(params):
    rng = stream_rng(21, "eval", 1)
    eps = [data_mod.gen_pi_episode(2, rng) for _ in range(7)]
    one = ev.evaluate(params, CFG, eps, "m", batch_size=7)
    few = ev.evaluate(params, CFG, eps, "m", batch_size=2)
    assert [r.predicted for r in one] == [r.predicted for r in few]


def test_stale_means_superseded(params):
    # stale is derivable from the episode alone: check the definition holds
    rng = stream_rng(21, "eval", 2)
    eps = [data_mod.gen_pi_episode(5, rng) for _ in range(20)]
    for r, e in zip(ev.evaluate(params, CFG, eps, "m"), eps):
        q = e.queries[0]
        if r.stale:
            assert r.predicted in q.superseded_values
            assert r.predicted != q.gold


# ---------------------------------------------------------------------------
# wilson interval


def test_wilson_known_value():
    lo, hi = ev.wilson_interval(8, 10)
    assert lo == pytest.approx(0.490157, abs=2e-5)
    assert hi == pytest.approx(0.943319, abs=2e-5)


def test_wilson_edges():
    assert ev.wilson_interval(0, 0) == (0.0, 1.0)
    lo, hi = ev.wilson_interval(0, 50)
    assert lo == 0.0
    assert 0 < hi < 0.1
    lo, hi = ev.wilson_interval(50, 50)
    assert 0.9 < lo < 1.0
    assert hi == 1.0


def test_wilson_contains_phat():
    for s, n in ((3, 7), (199, 200), (1, 400)):
        lo, hi = ev.wilson_interval(s, n)
        assert lo <= s / n <= hi


# ---------------------------------------------------------------------------
# slopes


def test_pi_slope_two_points():
    # accuracy falls 0.2 as depth goes 1 -> e: slope exactly -0.2
    assert ev.pi_slope({1: 0.9, int(np.e ** 1 + 0.5): 0.7}) != 0  # guard: keys are ints
    x = {1: 0.9}
    x[2] = 0.9 - 0.2 * np.log(2)
    assert ev.pi_slope(x) == pytest.approx(-0.2, abs=1e-12)


def test_pi_slope_frozen_case():
    # cross-checked against an independent least-squares fit
    acc = {1: 0.825, 2: 0.99, 5: 0.995, 10: 0.97, 15: 0.735, 20: 0.305, 30: 0.165}
    assert ev.pi_slope(acc) == pytest.approx(-0.189137, abs=1e-5)
    near = {d: acc[d] for d in (1, 2, 5, 10)}
    assert ev.pi_slope(near) == pytest.approx(0.055110, abs=1e-5)


def test_pi_slope_flat_is_zero():
    assert ev.pi_slope({1: 0.5, 5: 0.5, 30: 0.5}) == pytest.approx(0.0, abs=1e-15)


def test_pi_slope_needs_two_depths():
    with pytest.raises(ValueError):
        ev.pi_slope({5: 0.5})


def test_method_slopes_split():
    cells = [ev.CellSummary("m", d, 200, a, 0, 1, 0.0, 10.0)
             for d, a in ((1, 1.0), (2, 0.9), (10, 0.8), (30, 0.1))]
    rows = ev.method_slopes(cells)
    assert len(rows) == 1
    near = ev.pi_slope({1: 1.0, 2: 0.9, 10: 0.8})
    alld = ev.pi_slope({1: 1.0, 2: 0.9, 10: 0.8, 30: 0.1})
    assert rows[0]["slope_near"] == pytest.approx(near)
    assert rows[0]["slope_all"] == pytest.approx(alld)


# ---------------------------------------------------------------------------
# summaries and files


def _fake_records():
    rng = np.random.default_rng(5)
    records = []
    for method, base in (("a", 0.9), ("b", 0.2)):
        for depth in data_mod.EVAL_DEPTHS:
            for _ in range(40):
                correct = bool(rng.uniform() < base)
                records.append(ev.QueryRecord(
                    method=method, depth=depth, kind="pi", seq_len=3 * depth + 3,
                    predicted=0, gold=0 if correct else 1, correct=correct,
                    stale=not correct and bool(rng.uniform() < 0.5)))
    return records


def test_summarize_cells():
    cells = ev.summarize(_fake_records())
    assert len(cells) == 14                       # 2 methods x 7 depths
    for c in cells:
        assert c.n == 40
        assert c.acc_lo <= c.accuracy <= c.acc_hi
        assert 0.0 <= c.stale_rate <= 1.0
        assert c.mean_seq_len == 3 * c.depth + 3


def test_results_csv_round_trip(tmp_path):
    cells = ev.summarize(_fake_records())
    path = tmp_path / "results.csv"
    ev.write_results_csv(cells, path)
    back = ev.read_results_csv(path)
    assert len(back) == len(cells)
    for a, b in zip(cells, back):
        assert (a.method, a.depth, a.n) == (b.method, b.depth, b.n)
        assert b.accuracy == pytest.approx(a.accuracy, abs=1e-6)
        assert b.stale_rate == pytest.approx(a.stale_rate, abs=1e-6)


def test_emit_report_files(tmp_path):
    cells = ev.summarize(_fake_records())
    paths = ev.emit_report(cells, tmp_path)
    for p in paths.values():
        assert p.exists()
    plot = (tmp_path / "plotdata.csv").read_text().splitlines()
    assert plot[0] == "depth,a,b"
    assert len(plot) == 1 + len(data_mod.EVAL_DEPTHS)
    slopes = (tmp_path / "slopes.csv").read_text().splitlines()
    assert len(slopes) == 3


def test_emit_report_warns_on_missing_cell(tmp_path):
    cells = ev.summarize(_fake_records())[:-1]
    with pytest.warns(UserWarning):
        ev.emit_report(cells, tmp_path)
