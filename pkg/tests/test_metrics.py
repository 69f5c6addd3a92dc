import math
from fractions import Fraction

import numpy as np
import pytest

from pedattack import harness as hs, metrics as mt
from pedattack.detector import PEDESTRIAN, STOP_SIGN


def fisher_oracle(a, b, c, d):
    """Exact two-sided p by enumerating every table with the same margins (rational arithmetic)."""
    r1, r2, c1 = a + b, c + d, a + c
    n = r1 + r2

    def prob(x):
        return Fraction(math.comb(r1, x) * math.comb(r2, c1 - x), math.comb(n, c1))

    p0 = prob(a)
    support = range(max(0, c1 - r2), min(r1, c1) + 1)
    return float(sum(p for p in map(prob, support) if p <= p0))


def _record(frames, events=()):
    rec = hs.RunRecord("x", 0, intersection=60.0, exit_position=67.0, stop_events=list(events))
    for k, dets in enumerate(frames):
        rec.frames.append({"frame": k, "t": k * 0.1, "speed": 5.0, "position": float(k),
                           "detections": [[c, 0.9, 0, 0, 1, 1] for c in dets]})
    return rec


# ---------------------------------------------------------------- counting

def test_count_detections():
    assert mt.count_detections(_record([])) == (0, 0)
    rec = _record([[STOP_SIGN], [STOP_SIGN, PEDESTRIAN], [], [STOP_SIGN]])
    assert mt.count_detections(rec) == (3, 1)


def test_count_detections_matches_rescan():
    rng = np.random.default_rng(0)
    for _ in range(20):
        frames = [list(rng.integers(0, 2, size=rng.integers(0, 4))) for _ in range(30)]
        rec = _record(frames)
        stop = sum(STOP_SIGN in f for f in frames)
        ped = sum(PEDESTRIAN in f for f in frames)
        assert mt.count_detections(rec) == (stop, ped)


# ---------------------------------------------------------------- ratios

def test_stp():
    assert mt.stp(18.20, 3.50)[0] == pytest.approx(5.2)
    assert mt.stp(6.00, 0.4)[0] == pytest.approx(15)
    assert mt.stp(2.5, 2.5) == (1.0, mt.FINITE)
    assert mt.stp(3.0, 0.0) == (float("inf"), mt.INFINITE)
    v, flag = mt.stp(0.0, 0.0)
    assert math.isnan(v) and flag == mt.UNDEFINED


def _success(flag):
    return _record([], [{"frame": 0, "trigger": STOP_SIGN, "position": 10.0}] if flag else [])


def test_asr():
    assert mt.asr([_success(i < 5) for i in range(10)]) == 0.5
    assert mt.asr([_success(False)] * 10) == 0
    assert mt.asr([_success(True)] * 4) == 1.0
    with pytest.raises(ValueError):
        mt.asr([])


# ---------------------------------------------------------------- Fisher and odds ratio

def test_fisher_examples():
    assert mt.fisher_exact([[2, 4], [1, 2]]) == pytest.approx(1.0, abs=1e-12)
    assert mt.fisher_exact([[5, 5], [0, 10]]) == pytest.approx(fisher_oracle(5, 5, 0, 10), abs=1e-12)
    assert mt.fisher_exact([[5, 5], [0, 10]]) == pytest.approx(0.0325, abs=5e-5)


def test_fisher_symmetries():
    rng = np.random.default_rng(1)
    for _ in range(50):
        t = mt.ContingencyTable(*map(int, rng.integers(0, 15, 4)))
        p = mt.fisher_exact(t)
        assert mt.fisher_exact(t.row_swapped()) == pytest.approx(p, abs=1e-12)
        assert mt.fisher_exact(t.col_swapped()) == pytest.approx(p, abs=1e-12)
        assert 0.0 <= p <= 1.0


def test_fisher_matches_enumeration_for_small_margins():
    worst = 0.0
    n = 0
    for a in range(13):
        for b in range(13 - a):
            for c in range(13 - a):
                for d in range(min(13 - c, 13 - b)):
                    if a + b + c + d == 0:
                        continue
                    worst = max(worst, abs(mt.fisher_exact([[a, b], [c, d]]) - fisher_oracle(a, b, c, d)))
                    n += 1
    assert n > 5000
    assert worst <= 1e-12


def test_fisher_large_counts_stay_finite():
    p = mt.fisher_exact([[2230, 160], [1140, 420]])
    assert 0 <= p < 1e-10


@pytest.mark.parametrize("table,expected", [
    ([[223, 16], [114, 42]], 5.1349),
    ([[230, 9], [144, 31]], 5.5015),
    ([[130, 46], [70, 55]], 2.2205),
])
def test_odds_ratio_reproduces_reconstructed_tables(table, expected):
    value, flag = mt.odds_ratio(table)
    assert flag == mt.FINITE
    assert abs(value - expected) <= 5e-4


def test_odds_ratio_flags():
    assert mt.odds_ratio([[1, 1], [1, 1]]) == (1.0, mt.FINITE)
    assert mt.odds_ratio([[3, 0], [2, 4]]) == (float("inf"), mt.INFINITE)
    assert mt.odds_ratio([[0, 2], [2, 4]]) == (0.0, mt.ZERO)
    v, flag = mt.odds_ratio([[0, 0], [2, 4]])
    assert math.isnan(v) and flag == mt.UNDEFINED


def test_odds_ratio_row_swap_reciprocal():
    rng = np.random.default_rng(2)
    for _ in range(50):
        t = mt.ContingencyTable(*map(int, rng.integers(1, 100, 4)))
        assert mt.odds_ratio(t)[0] * mt.odds_ratio(t.row_swapped())[0] == pytest.approx(1.0, rel=1e-12)


def test_table_invariants():
    with pytest.raises(ValueError):
        mt.ContingencyTable(0, 0, 0, 0)
    with pytest.raises(ValueError):
        mt.ContingencyTable(-1, 2, 3, 4)
    with pytest.raises(ValueError):
        mt.ContingencyTable(1.5, 2, 3, 4)


# ---------------------------------------------------------------- summaries and tables

def _summary(config, dynamic, stops, peds, succ=None):
    return mt.ScenarioSummary(config, dynamic, list(stops), list(peds),
                              list(succ) if succ is not None else [False] * len(stops))


def test_model_level_table_from_per_run_counts():
    # per-run counts whose totals equal the published means x 10 runs
    both = _summary("patch-both", True, [22] * 7 + [23] * 3, [2] * 6 + [1] * 4)
    single = _summary("patch", True, [11] * 6 + [12] * 4, [4] * 4 + [5] * 4 + [3] * 2)
    t = mt.build_model_level_table(both, single)
    assert t == mt.ContingencyTable(223, 16, 114, 42)
    assert mt.odds_ratio(t)[0] == pytest.approx(5.1349, abs=5e-4)
    benign_c = _summary("collusion-benign", True, [13] * 10, [4] * 4 + [5] * 6)
    benign_s = _summary("single-benign", True, [7] * 10, [5] * 5 + [6] * 5)
    assert mt.odds_ratio(mt.build_model_level_table(benign_c, benign_s))[0] == pytest.approx(2.2205, abs=5e-4)
    assert mt.odds_ratio(mt.build_model_level_table(both, both)) == (1.0, mt.FINITE)


def test_model_level_table_rejects_non_integer_totals():
    with pytest.raises(ValueError):
        mt.build_model_level_table(_summary("a", True, [1.5], [2]), _summary("b", True, [1], [2]))


def test_summary_statistics_match_brute_force():
    rng = np.random.default_rng(4)
    stops = list(rng.integers(0, 30, 10))
    peds = list(rng.integers(0, 10, 10))
    s = _summary("patch", True, stops, peds, [True] * 3 + [False] * 7)
    assert s.stop_mean == sum(stops) / 10
    assert s.stop_std == pytest.approx(math.sqrt(sum((x - s.stop_mean) ** 2 for x in stops) / 9), rel=1e-12)
    assert s.ped_std == pytest.approx(float(np.std(peds, ddof=1)), rel=1e-12)
    assert s.asr == 0.3
    one = _summary("patch", False, [4], [2], [False])
    assert one.stop_std == 0.0 and one.ped_std == 0.0


def test_csv_round_trip_and_report():
    summaries = [_summary("single-benign", False, [0, 1], [5, 6]),
                 _summary("single-benign", True, [1, 2], [4, 5]),
                 _summary("patch", True, [10, 13], [3, 0], [True, False]),
                 _summary("patch-both", True, [20, 25], [1, 2], [True, True])]
    rows = mt.parse_csv(mt.summary_csv(summaries))
    assert [r["config"] for r in rows] == ["single-benign", "single-benign", "patch", "patch-both"]
    for r, s in zip(rows, summaries):
        assert r["stp"] == s.stp and r["asr"] == s.asr
        assert r["stop_mean"] == s.stop_mean and r["ped_std"] == s.ped_std
    fisher = mt.parse_csv(mt.fisher_csv(summaries))
    assert fisher[0]["pair"] == "patch-both vs patch (dynamic)"
    assert fisher[0]["odds_ratio"] == mt.odds_ratio([[45, 3], [23, 3]])[0]
    text = mt.report(summaries)
    assert "System-level ASR" in text and "patch-both" in text


def test_single_run_report():
    text = mt.report([_summary("patch", False, [3], [1], [False])])
    assert "0.00" in text
    rows = mt.parse_csv(mt.summary_csv([_summary("patch", False, [3], [1], [False])]))
    assert rows[0]["stop_std"] == 0.0
