"""Virtual-clock cost model: turn round logs and schedules into time and speedup.

Time units are whatever the profile is expressed in.  Two accountings are
reported side by side: end-to-end (prefill included) and decode-only (time
after the target finishes prefilling).  The autoregressive baseline is
``t_target_prefill + n * t_target_verify`` for ``n`` committed tokens.

Mean accepted tokens (``mat``) is run-based: tokens accumulate over
consecutive rounds without a rejection, and a run closes with (and includes)
the first round that contains one.  ``mat_per_round`` is the plain mean per
verification round.  Both count a round's yield ``accepted_count + 1``, so
cutting the last round short at the generation limit does not bias them.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable

import numpy as np

from .speculative import ExtraKind, RoundLog, RoundRecord, iter_rounds
from .trace import ScheduleTrace, TraceError, TraceEvent

ROW_TARGET_PREFILL = "Target Model Prefilling"
ROW_TARGET_DECODE = "Target Model Decoding"
ROW_DRAFT_PREFILL = "Draft Model Prefilling"
ROW_DRAFT_DECODE = "Draft Model Decoding"
ROW_PRUNE = "Video Token Pruning"
ROW_IDLE = "Idle"
BREAKDOWN_ROWS = (ROW_TARGET_PREFILL, ROW_TARGET_DECODE, ROW_DRAFT_PREFILL, ROW_DRAFT_DECODE, ROW_PRUNE)

# absorbs representation error such as (0.8 - 0.2) / 0.05 == 11.999999999999998
FLOOR_EPS = 1e-9


@dataclass(frozen=True)
class LatencyProfile:
    t_draft_prefill: float = 0.2
    t_target_prefill: float = 0.8
    t_draft_decode: float = 0.05
    t_target_verify: float = 0.15
    t_prune: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be a finite non-negative number, got {v!r}")
        if self.t_target_verify <= 0:
            raise ValueError("t_target_verify must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RunMetrics:
    method: str
    total_time: float
    ar_baseline_time: float
    speedup: float  # ar_baseline_time / total_time
    decode_time: float
    ar_decode_time: float
    decode_speedup: float
    mat: float
    mat_per_round: float
    tokens_emitted: int
    rounds: int
    breakdown: dict[str, float]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def round_speedup(profile: LatencyProfile, gamma: int, accepted: int) -> float:
    """Throughput of one serial round relative to one target pass per token."""
    if not 0 <= accepted <= gamma:
        raise ValueError(f"accepted must be in [0, {gamma}], got {accepted}")
    t_v = profile.t_target_verify
    return (accepted + 1) * t_v / (gamma * profile.t_draft_decode + t_v)


def prefill_buffer(profile: LatencyProfile) -> int:
    """Draft tokens that fit in the gap between draft and target prefill."""
    if profile.t_draft_decode <= 0:
        raise ValueError("t_draft_decode must be > 0")
    gap = profile.t_target_prefill - profile.t_draft_prefill
    return max(0, math.floor(gap / profile.t_draft_decode + FLOOR_EPS))


def round_yield(r: RoundRecord) -> int:
    return r.accepted_count + 1


def mat_runs(rounds: Iterable[RoundRecord]) -> list[int]:
    """Token counts of the acceptance runs (see module docstring)."""
    runs, current, open_run = [], 0, False
    for r in rounds:
        current += round_yield(r)
        open_run = True
        if r.rejected:
            runs.append(current)
            current, open_run = 0, False
    if open_run:
        runs.append(current)
    return runs


def mat_statistics(rounds: Iterable[RoundRecord]) -> tuple[float, float]:
    """``(mat, mat_per_round)``; zeros for an empty log."""
    rounds = list(rounds)
    if not rounds:
        return 0.0, 0.0
    runs = mat_runs(rounds)
    return float(np.mean(runs)), sum(round_yield(r) for r in rounds) / len(rounds)


def expected_emitted_per_round(alpha: float, gamma: int) -> float:
    """Mean tokens per round under iid per-token acceptance ``alpha``."""
    if alpha == 1.0:
        return float(gamma + 1)
    return (1.0 - alpha ** (gamma + 1)) / (1.0 - alpha)


def synthetic_round_log(alpha: float, gamma: int, n_rounds: int, seed: int = 0) -> RoundLog:
    """Rounds whose draft tokens are each accepted independently with probability ``alpha``."""
    rng = np.random.default_rng(seed)
    ok = rng.random((n_rounds, gamma)) < alpha
    accepted = np.where(ok.all(axis=1), gamma, np.argmin(ok, axis=1))
    log = RoundLog(gamma=gamma, method="serial_sd")
    for i, a in enumerate(accepted.tolist()):
        kind = ExtraKind.BONUS if a == gamma else ExtraKind.CORRECTION
        log.append(RoundRecord(i, "serial", gamma, a, a + 1, kind.value))
    return log


def _ar_times(profile: LatencyProfile, n: int) -> tuple[float, float]:
    decode = n * profile.t_target_verify
    return profile.t_target_prefill + decode, decode


def _check_rounds(rounds: list[RoundRecord]) -> None:
    for i, r in enumerate(rounds):
        if r.gamma_used < 0 or not 0 <= r.accepted_count <= max(r.gamma_used, 0):
            raise TraceError(f"accepted_count {r.accepted_count} outside [0, {r.gamma_used}]", i)
        if not 0 < r.emitted <= r.accepted_count + 1:
            raise TraceError(f"emitted {r.emitted} outside [1, {r.accepted_count + 1}]", i)


def _metrics(method: str, total: float, decode: float, breakdown: dict[str, float],
             rounds: list[RoundRecord], profile: LatencyProfile, ar: bool = False) -> RunMetrics:
    n = sum(r.emitted for r in rounds)
    ar_total, ar_decode = _ar_times(profile, n)
    if ar:
        mat = per_round = 1.0 if rounds else 0.0
    else:
        mat, per_round = mat_statistics(rounds)
    return RunMetrics(
        method=method,
        total_time=total,
        ar_baseline_time=ar_total,
        speedup=ar_total / total if total > 0 else math.inf,
        decode_time=decode,
        ar_decode_time=ar_decode,
        decode_speedup=ar_decode / decode if decode > 0 else math.inf,
        mat=mat,
        mat_per_round=per_round,
        tokens_emitted=n,
        rounds=len(rounds),
        breakdown=breakdown,
    )


def _simulate_log(log: RoundLog, profile: LatencyProfile, overlap: bool) -> RunMetrics:
    rounds = iter_rounds(log)
    _check_rounds(rounds)
    p = profile
    if log.method == "ar":
        total, decode = _ar_times(p, sum(r.emitted for r in rounds))
        breakdown = {ROW_TARGET_PREFILL: p.t_target_prefill, ROW_TARGET_DECODE: decode,
                     ROW_DRAFT_PREFILL: 0.0, ROW_DRAFT_DECODE: 0.0, ROW_PRUNE: 0.0}
        return _metrics("ar", total, decode, breakdown, rounds, p, ar=True)
    verify = len(rounds) * p.t_target_verify
    drafting = sum(r.gamma_used for r in rounds) * p.t_draft_decode
    if overlap:
        draft_side = p.t_prune + p.t_draft_prefill
        prefill = max(p.t_target_prefill, draft_side)
        decode = sum(max(r.gamma_used * p.t_draft_decode, p.t_target_verify) for r in rounds)
        excess = max(0.0, draft_side - p.t_target_prefill)
        # the exposed tail of the draft's startup is its prefill first, then pruning
        breakdown = {ROW_TARGET_PREFILL: p.t_target_prefill, ROW_TARGET_DECODE: verify,
                     ROW_DRAFT_PREFILL: min(p.t_draft_prefill, excess),
                     ROW_DRAFT_DECODE: decode - verify,
                     ROW_PRUNE: excess - min(p.t_draft_prefill, excess)}
    else:
        prefill = p.t_prune + p.t_draft_prefill + p.t_target_prefill
        decode = drafting + verify
        breakdown = {ROW_TARGET_PREFILL: p.t_target_prefill, ROW_TARGET_DECODE: verify,
                     ROW_DRAFT_PREFILL: p.t_draft_prefill, ROW_DRAFT_DECODE: drafting,
                     ROW_PRUNE: p.t_prune}
    return _metrics(log.method, prefill + decode, decode, breakdown, rounds, p)


def _merge(intervals: list[tuple[float, float]]) -> list[tuple[float, float]]:
    out: list[list[float]] = []
    for a, b in sorted(intervals):
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def _covered(a: float, b: float, merged: list[tuple[float, float]]) -> float:
    return sum(max(0.0, min(b, y) - max(a, x)) for x, y in merged)


DRAFT_ROW = {"prune": ROW_PRUNE, "prefill": ROW_DRAFT_PREFILL, "decode_one": ROW_DRAFT_DECODE}


def _simulate_trace(trace: ScheduleTrace, profile: LatencyProfile) -> RunMetrics:
    trace.validate()
    rounds = list(trace.rounds)
    if trace.method == "ar":
        # target-only timing is fixed by the token count; avoid summing event times
        return _simulate_log(RoundLog(rounds, 0, "ar"), profile, overlap=False)
    _check_rounds(rounds)
    total = trace.end_time()
    target_busy = _merge([(e.virtual_start, e.virtual_end) for e in trace.events
                          if e.worker == "target" and e.virtual_start < total])
    breakdown = {row: 0.0 for row in BREAKDOWN_ROWS}
    for e in trace.events:
        a, b = e.virtual_start, min(e.virtual_end, total)
        if b <= a:
            continue
        if e.worker == "target":
            row = ROW_TARGET_PREFILL if e.action == "prefill" else ROW_TARGET_DECODE
            breakdown[row] += b - a
        elif e.action in DRAFT_ROW:
            breakdown[DRAFT_ROW[e.action]] += (b - a) - _covered(a, b, target_busy)
    idle = total - sum(breakdown.values())
    if idle > 1e-9:
        breakdown[ROW_IDLE] = idle
    decode = total - trace.target_prefill_end()
    return _metrics(trace.method, total, decode, breakdown, rounds, profile)


def simulate(log: RoundLog | ScheduleTrace, profile: LatencyProfile, overlap: bool = False) -> RunMetrics:
    """Time a run.

    A :class:`RoundLog` is charged additively (``overlap=False``) or with each
    round costing ``max(drafting, verify)`` (``overlap=True``).  A
    :class:`ScheduleTrace` carries its own timing: total time is the end of
    the last verification, and draft work is charged only where the target
    was not busy.
    """
    if isinstance(log, ScheduleTrace):
        return _simulate_trace(log, profile)
    return _simulate_log(log, profile, overlap)


def serial_trace(log: RoundLog, profile: LatencyProfile) -> ScheduleTrace:
    """Lay a serial round log out on the two workers, nothing overlapped."""
    p = profile
    ev: list[TraceEvent] = []
    t = 0.0
    ar = log.method == "ar"
    if not ar:
        if p.t_prune > 0:
            ev.append(TraceEvent("draft", "prune", t, t + p.t_prune, -1))
            t += p.t_prune
        ev.append(TraceEvent("draft", "prefill", t, t + p.t_draft_prefill, -1))
        t += p.t_draft_prefill
    ev.append(TraceEvent("target", "prefill", t, t + p.t_target_prefill, -1))
    t += p.t_target_prefill
    pos = 0
    for r in iter_rounds(log):
        for i in range(r.gamma_used):
            ev.append(TraceEvent("draft", "decode_one", t, t + p.t_draft_decode, r.round,
                                 position=pos + i, discarded=i >= r.accepted_count))
            t += p.t_draft_decode
        ev.append(TraceEvent("target", "verify_batch", t, t + p.t_target_verify, r.round,
                             tokens=r.gamma_used))
        t += p.t_target_verify
        pos += r.emitted
    return ScheduleTrace(ev, iter_rounds(log), log.gamma, log.method)


def breakdown_csv(metrics: RunMetrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["phase", "time"])
    for row, v in metrics.breakdown.items():
        w.writerow([row, format_float(v)])
    return buf.getvalue()


def format_float(x: float) -> str:
    """Locale-free shortest round-trip representation."""
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    return repr(float(x))
