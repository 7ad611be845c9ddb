import math

import numpy as np
import pytest

from specdeck.latency import (BREAKDOWN_ROWS, ROW_DRAFT_DECODE, ROW_DRAFT_PREFILL, ROW_PRUNE,
                              LatencyProfile, breakdown_csv, expected_emitted_per_round, mat_runs,
                              mat_statistics, prefill_buffer, round_speedup, serial_trace, simulate,
                              synthetic_round_log)
from specdeck.speculative import RoundLog, RoundRecord
from specdeck.trace import ScheduleTrace, TraceError, TraceEvent


def rounds(*accepted, gamma=3):
    log = RoundLog(gamma=gamma)
    for i, a in enumerate(accepted):
        log.append(RoundRecord(i, "serial", gamma, a, a + 1, "bonus" if a == gamma else "correction"))
    return log


@pytest.mark.parametrize("tp,dp,td,expected", [(0.8, 0.2, 0.05, 12), (0.5, 0.8, 0.05, 0), (1.0, 0.0, 0.1, 10)])
def test_prefill_buffer(tp, dp, td, expected):
    assert prefill_buffer(LatencyProfile(dp, tp, td, 0.15)) == expected


def test_profile_validation():
    with pytest.raises(ValueError):
        LatencyProfile(t_draft_prefill=-1)
    with pytest.raises(ValueError):
        LatencyProfile(t_target_verify=0)
    with pytest.raises(ValueError):
        round_speedup(LatencyProfile(), 3, 4)


def test_serial_worked_example_decoding_speedup():
    profile = LatencyProfile(0.0, 0.0, 1.0, 3.0)
    m = simulate(rounds(3), profile)
    assert m.decode_speedup == 2.0
    assert m.speedup == 2.0


def test_trivial_profile_reaches_gamma_plus_one():
    profile = LatencyProfile(1.0, 1.0, 0.0, 2.0)
    m = simulate(rounds(4, 4, 4, gamma=4), profile)
    assert m.decode_speedup == 5.0


def test_serial_breakdown_sums_to_total():
    profile = LatencyProfile(0.2, 0.8, 0.05, 0.15, 0.03)
    log = synthetic_round_log(0.7, 4, 200, seed=1)
    m = simulate(log, profile)
    assert abs(sum(m.breakdown.values()) - m.total_time) <= 1e-9
    assert tuple(m.breakdown) == BREAKDOWN_ROWS
    assert m.ar_baseline_time == pytest.approx(0.8 + m.tokens_emitted * 0.15)


def test_overlap_hides_draft_under_verify():
    profile = LatencyProfile(0.2, 0.8, 0.05, 0.3)
    m = simulate(rounds(3, 3), profile, overlap=True)
    assert m.breakdown[ROW_DRAFT_DECODE] == 0.0
    assert m.breakdown[ROW_DRAFT_PREFILL] == 0.0
    assert m.total_time == pytest.approx(0.8 + 2 * 0.3)


def test_overlap_never_slower_than_serial():
    rng = np.random.default_rng(2)
    for _ in range(50):
        profile = LatencyProfile(*rng.uniform(0.01, 1.0, size=5))
        log = synthetic_round_log(float(rng.uniform()), int(rng.integers(1, 8)), 30, int(rng.integers(1e6)))
        assert simulate(log, profile, overlap=True).total_time <= simulate(log, profile).total_time + 1e-12


def test_overlap_exposes_prefill_before_prune():
    profile = LatencyProfile(0.5, 0.6, 0.05, 0.15, 0.3)
    m = simulate(rounds(3), profile, overlap=True)
    assert m.breakdown[ROW_DRAFT_PREFILL] == pytest.approx(0.2)
    assert m.breakdown[ROW_PRUNE] == 0.0


def test_mat_runs_close_at_rejections():
    log = rounds(3, 3, 1, 3, 0, 3)
    assert mat_runs(log) == [4 + 4 + 2, 4 + 1, 4]
    mat, per_round = mat_statistics(log)
    assert mat == pytest.approx(19 / 3)
    assert per_round == pytest.approx(19 / 6)


def test_mat_ignores_final_round_truncation():
    log = rounds(3, 3)
    log.rounds[-1].emitted = 2
    assert mat_statistics(log) == (8.0, 4.0)


def test_ar_run_metrics():
    log = RoundLog(gamma=0, method="ar")
    for i in range(10):
        log.append(RoundRecord(i, "ar", 0, 0, 1, "bonus"))
    m = simulate(log, LatencyProfile())
    assert m.speedup == 1.0 and m.mat == 1.0
    assert simulate(serial_trace(log, LatencyProfile()), LatencyProfile()).speedup == 1.0


def test_expected_emitted_closed_form():
    assert expected_emitted_per_round(1.0, 5) == 6
    assert expected_emitted_per_round(0.0, 5) == 1
    assert expected_emitted_per_round(0.5, 2) == pytest.approx(1.75)


def test_serial_trace_matches_additive_timing():
    profile = LatencyProfile(0.2, 0.8, 0.05, 0.15, 0.02)
    log = synthetic_round_log(0.6, 3, 40, seed=3)
    trace = serial_trace(log, profile)
    trace.validate()
    assert simulate(trace, profile).total_time == pytest.approx(simulate(log, profile).total_time)


def test_malformed_log_names_round():
    log = rounds(3, 1)
    log.rounds[1].accepted_count = 9
    with pytest.raises(TraceError) as err:
        simulate(log, LatencyProfile())
    assert err.value.round_index == 1


def test_overlapping_trace_is_rejected():
    trace = ScheduleTrace([TraceEvent("target", "verify_batch", 0.0, 1.0, 0, tokens=1),
                           TraceEvent("target", "verify_batch", 0.5, 1.5, 1, tokens=1)],
                          list(rounds(1, 1, gamma=1)), 1)
    with pytest.raises(TraceError):
        simulate(trace, LatencyProfile())


def test_breakdown_csv_rows():
    text = breakdown_csv(simulate(rounds(2), LatencyProfile()))
    lines = text.strip().splitlines()
    assert lines[0] == "phase,time"
    assert [ln.split(",")[0] for ln in lines[1:]] == list(BREAKDOWN_ROWS)
    assert all(math.isfinite(float(ln.split(",")[1])) for ln in lines[1:])
