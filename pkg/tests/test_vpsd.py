import numpy as np
import pytest

from specdeck.latency import LatencyProfile, simulate
from specdeck.models import make_pair
from specdeck.speculative import Mode, run_autoregressive, run_serial_sd
from specdeck.vpsd import (CONSERVATIVE, OPTIMISTIC, VPSDScheduler, conservative_shape, run_vpsd,
                           run_vpsd_threaded, startup_buffer)

PROFILE = LatencyProfile(0.2, 0.8, 0.05, 0.15, 0.0)


def test_startup_buffer_charges_pruning_to_draft():
    assert startup_buffer(PROFILE) == 12
    assert startup_buffer(LatencyProfile(0.2, 0.8, 0.05, 0.15, 0.1)) == 10
    assert startup_buffer(LatencyProfile(0.9, 0.8, 0.05, 0.15)) == 0


def test_conservative_shape_rule():
    assert conservative_shape(5, PROFILE) == "single"  # 4 * 0.05 >= 0.15
    assert conservative_shape(3, PROFILE) == "batch"  # 2 * 0.05 < 0.15
    assert conservative_shape(3, PROFILE, "single") == "single"
    with pytest.raises(ValueError):
        conservative_shape(3, PROFILE, "eager")


def test_prefill_fills_buffer_and_enters_optimistic():
    pair = make_pair(8, 3, 0.7, seed=1)
    sched = VPSDScheduler(pair.draft, pair.target, [1, 2], 5, PROFILE)
    state = sched.sync_prefill()
    assert state.mode == OPTIMISTIC
    assert len(state.draft_buffer) == 12
    assert state.committed == [1, 2]
    assert state.generated == []
    with pytest.raises(RuntimeError):
        sched.sync_prefill()


def test_no_buffer_starts_conservative():
    pair = make_pair(8, 3, 0.7, seed=1)
    sched = VPSDScheduler(pair.draft, pair.target, [1], 3, LatencyProfile(0.8, 0.8, 0.05, 0.15))
    assert sched.sync_prefill().mode == CONSERVATIVE
    with pytest.raises(RuntimeError):
        sched.step_optimistic()


def test_mode_follows_last_pass():
    pair = make_pair(8, 3, 0.5, seed=4)
    sched = VPSDScheduler(pair.draft, pair.target, [1, 2], 3, PROFILE)
    sched.sync_prefill()
    for _ in range(40):
        sched.step()
        last = sched.trace.rounds[-1]
        rejected = last.extra_kind in ("correction", "probe_rejected")
        assert sched.phase == (CONSERVATIVE if rejected else OPTIMISTIC)
        # a rejection empties the draft buffer
        if rejected:
            assert sched.state.draft_buffer == []


def test_batches_never_exceed_gamma():
    pair = make_pair(16, 3, 0.9, seed=2)
    for gamma in (1, 2, 4):
        _, trace = run_vpsd(pair.draft, pair.target, [3], gamma, 60, PROFILE)
        assert all(0 <= r.gamma_used <= gamma for r in trace.rounds)
        assert all(e.tokens <= gamma for e in trace.events if e.action == "verify_batch")


@pytest.mark.parametrize("shape", ["auto", "single", "batch"])
def test_trace_valid_and_lossless_for_every_shape(shape):
    rng = np.random.default_rng(3)
    for i in range(20):
        pair = make_pair(8, 3, float(rng.uniform()), seed=i)
        ar, _ = run_autoregressive(pair.target, [0, 1], 30)
        out, trace = run_vpsd(pair.draft, pair.target, [0, 1], 3, 30, PROFILE, conservative=shape)
        trace.validate()
        assert out == ar
        assert trace.tokens_emitted == 30


def test_abort_is_recorded_on_rejection():
    pair = make_pair(8, 3, 0.3, seed=5)
    profile = LatencyProfile(0.2, 0.8, 0.04, 0.15)  # a decode is mid-flight at every verify end
    _, trace = run_vpsd(pair.draft, pair.target, [1], 5, 40, profile, conservative="single")
    aborts = [e for e in trace.events if e.action == "abort"]
    assert aborts
    for a in aborts:
        verify_ends = {e.virtual_end for e in trace.events if e.action == "verify_batch"}
        assert a.virtual_start in verify_ends
        truncated = [e for e in trace.events if e.action == "decode_one" and e.virtual_end == a.virtual_start
                     and e.position == a.position]
        assert truncated and truncated[0].discarded


def test_speculate_off_matches_on():
    pair = make_pair(8, 3, 0.6, seed=6)
    on, _ = run_vpsd(pair.draft, pair.target, [2], 4, 50, PROFILE, speculate=True)
    off, trace = run_vpsd(pair.draft, pair.target, [2], 4, 50, PROFILE, speculate=False)
    assert on == off
    trace.validate()


@pytest.mark.parametrize("profile", [
    LatencyProfile(0.2, 0.8, 0.05, 0.15, 0.01),
    LatencyProfile(0.2, 0.8, 0.1, 0.15, 0.0),
    LatencyProfile(0.5, 0.5, 0.02, 0.1, 0.0),
    LatencyProfile(0.1, 1.0, 0.3, 0.2, 0.05),
])
def test_never_slower_than_serial(profile):
    rng = np.random.default_rng(9)
    for i in range(25):
        pair = make_pair(int(rng.choice([8, 16])), 3, float(rng.uniform()), seed=300 + i)
        for gamma in (1, 3, 5):
            _, log = run_serial_sd(pair.draft, pair.target, [1, 2], gamma, 48)
            _, trace = run_vpsd(pair.draft, pair.target, [1, 2], gamma, 48, profile)
            assert simulate(trace, profile).total_time <= simulate(log, profile).total_time + 1e-9


def test_full_agreement_leaves_target_busy():
    profile = LatencyProfile(0.2, 0.8, 0.03, 0.15, 0.0)
    pair = make_pair(16, 3, 1.0, seed=7)
    _, trace = run_vpsd(pair.draft, pair.target, [4, 5], 5, 100, profile)
    assert trace.target_idle_after_prefill() == 0.0
    assert simulate(trace, profile).breakdown.get("Idle", 0.0) == 0.0


@pytest.mark.parametrize("mode", [Mode.GREEDY, Mode.STOCHASTIC])
def test_stochastic_and_greedy_match_serial(mode):
    for seed in range(8):
        pair = make_pair(6, 3, 0.5, seed=seed)
        serial, _ = run_serial_sd(pair.draft, pair.target, [1], 3, 40, mode, seed)
        overlapped, _ = run_vpsd(pair.draft, pair.target, [1], 3, 40, PROFILE, seed, mode)
        assert overlapped == serial


def test_threaded_executor_with_real_sleeps():
    pair = make_pair(8, 3, 0.7, seed=8)
    virtual, _ = run_vpsd(pair.draft, pair.target, [1, 2], 3, 30, PROFILE, 8, Mode.STOCHASTIC)
    threaded, log = run_vpsd_threaded(pair.draft, pair.target, [1, 2], 3, 30, PROFILE, 8,
                                      Mode.STOCHASTIC, time_scale=0.002)
    assert threaded == virtual
    assert log.tokens_emitted == 30


def test_constructor_validation():
    pair = make_pair(8, 3, 0.5, seed=0)
    other = make_pair(6, 3, 0.5, seed=0)
    with pytest.raises(ValueError):
        VPSDScheduler(pair.draft, pair.target, [], 3, PROFILE)
    with pytest.raises(ValueError):
        VPSDScheduler(pair.draft, pair.target, [1], 0, PROFILE)
    with pytest.raises(ValueError):
        VPSDScheduler(other.draft, pair.target, [1], 3, PROFILE)
