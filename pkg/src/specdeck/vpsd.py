"""Overlapped draft/verify scheduling on a virtual clock.

The draft and target run concurrently.  After both prefills (the draft uses
the target's longer prefill to decode a buffer of tokens), every target pass
verifies a batch of ``m`` draft tokens that were ready when the pass started
(``0 <= m <= gamma``) and commits ``accepted + 1`` tokens.  The extra slot
after a fully accepted batch is filled in one of three ways:

* the draft's token for that position finished before the pass ended: it is
  checked against the target distribution (a *probe*), accepted or corrected;
* otherwise the target supplies the token itself (*bonus*); a draft token
  still being computed for that position is reconciled when it finishes.

Mode switching follows the last pass.  After a rejection (a corrected batch
token or a rejected probe) the draft aborts, restarts from the committed
prefix, and the scheduler is *conservative*.  After a pass without rejection
it is *optimistic*: the next pass starts immediately with whatever draft
tokens are ready (at most ``gamma``), or with an empty batch if none are, so
the target never waits on the draft.

A conservative pass comes in two shapes:

* ``single``: the target waits for the first new draft token and verifies it
  alone while the draft keeps going;
* ``batch``: the target waits for ``gamma`` new draft tokens, as serial
  decoding would, while the draft keeps going during verification.

``single`` spends an extra target pass whenever a rejection follows soon
after, which only pays off when drafting the rest of a batch costs at least
one target pass.  The default ``auto`` picks ``single`` exactly when
``(gamma - 1) * t_draft_decode >= t_target_verify``.

How far the draft may run ahead of the committed prefix:

* during prefill: exactly the prefill buffer;
* during a pass verifying ``m`` tokens: ``m + gamma + 1`` (the next batch and
  its probe), or ``max(gamma, 2)`` during a ``single`` conservative pass.

Every committed token is decided by the position-keyed rules of
:mod:`specdeck.speculative`, so the output is the same as serial speculative
decoding and as target-only decoding for the same seed, whatever the timing.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

from .latency import LatencyProfile, prefill_buffer
from .prob import ProbDist, SeededRng, role_streams
from .speculative import (
    ExtraKind,
    Mode,
    ModelOracle,
    RoundLog,
    RoundRecord,
    bonus,
    propose,
    resolve,
)
from .trace import ScheduleTrace, TraceEvent

OPTIMISTIC = "optimistic"
CONSERVATIVE = "conservative"
TIME_EPS = 1e-9


def startup_buffer(profile: LatencyProfile) -> int:
    """Draft tokens decoded before the target finishes prefilling.

    Pruning runs on the draft side before its prefill, so it is charged
    against the same headroom.
    """
    if profile.t_draft_decode <= 0:
        return 0
    return prefill_buffer(replace(profile, t_draft_prefill=profile.t_draft_prefill + profile.t_prune))


def conservative_shape(gamma: int, profile: LatencyProfile, choice: str = "auto") -> str:
    """Resolve ``auto`` to ``single`` or ``batch`` (see module docstring)."""
    if choice not in ("auto", "single", "batch"):
        raise ValueError(f"conservative must be auto, single or batch, got {choice!r}")
    if choice != "auto":
        return choice
    single = (gamma - 1) * profile.t_draft_decode >= profile.t_target_verify
    return "single" if single else "batch"


@dataclass
class DraftedToken:
    position: int
    token: int
    dist: ProbDist
    ready: float
    event: int  # index of its decode_one event in the trace


@dataclass
class _InFlight:
    position: int
    token: int
    dist: ProbDist
    start: float
    end: float


@dataclass
class SchedulerState:
    mode: str
    committed: list[int]
    draft_buffer: list[int]  # ready draft tokens extending ``committed``
    round: int
    prompt_len: int
    pending_speculative: list[int] = field(default_factory=list)

    @property
    def generated(self) -> list[int]:
        return self.committed[self.prompt_len:]


class VPSDScheduler:
    """Virtual-clock executor; reference semantics for overlapped decoding."""

    def __init__(self, draft_m: ModelOracle, target_m: ModelOracle, prompt: Sequence[int],
                 gamma: int, profile: LatencyProfile, rng: SeededRng | int = 0,
                 mode: Mode = Mode.GREEDY, speculate: bool = True, conservative: str = "auto"):
        if len(prompt) < 1:
            raise ValueError("prompt must be non-empty")
        if gamma < 1:
            raise ValueError("gamma must be >= 1")
        if draft_m.vocab != target_m.vocab:
            raise ValueError(f"draft vocab {draft_m.vocab} != target vocab {target_m.vocab}")
        self.draft_m, self.target_m = draft_m, target_m
        self.gamma = gamma
        self.profile = profile
        self.mode = Mode(mode)
        self.speculate = speculate
        self.conservative = conservative_shape(gamma, profile, conservative)
        self.draft_rng, self.target_rng = role_streams(rng)
        self.prompt_len = len(prompt)
        self.committed = list(prompt)
        self.ahead: list[DraftedToken] = []
        self.inflight: _InFlight | None = None
        self.d_free = 0.0
        self.cap = self.prompt_len
        self.now = 0.0
        self.phase = CONSERVATIVE
        self.round = 0
        self.limit: int | None = None
        self.trace = ScheduleTrace(gamma=gamma, method="vpsd")
        self._prefilled = False

    # draft worker ------------------------------------------------------

    def _emit(self, ev: TraceEvent) -> int:
        self.trace.events.append(ev)
        return len(self.trace.events) - 1

    def _discard(self, idx: int) -> None:
        self.trace.events[idx] = replace(self.trace.events[idx], discarded=True)

    def _next_position(self) -> int:
        return len(self.committed) + len(self.ahead)

    def _set_cap(self, cap: int, at: float) -> None:
        self.cap = cap
        if self.inflight is None:
            self.d_free = max(self.d_free, at)

    def _draft_until(self, t: float) -> None:
        """Run the draft worker: finish tokens ending by ``t``, start tokens before ``t``."""
        t_d = self.profile.t_draft_decode
        while True:
            if self.inflight is not None:
                f = self.inflight
                if f.end > t + TIME_EPS:
                    return
                self.inflight = None
                self.d_free = f.end
                stale = f.position < len(self.committed)
                idx = self._emit(TraceEvent(
                    "draft", "decode_one", f.start, f.end, self.round if self._prefilled else -1,
                    position=f.position,
                    discarded=stale and self.committed[f.position] != f.token))
                if not stale:
                    self.ahead.append(DraftedToken(f.position, f.token, f.dist, f.end, idx))
                continue
            j = self._next_position()
            if j >= self.cap or self.d_free >= t - TIME_EPS:
                return
            ctx = self.committed + [a.token for a in self.ahead]
            q = self.draft_m.next_dist(ctx)
            x = propose(q, j, self.draft_rng, self.mode)
            self.inflight = _InFlight(j, x, q, self.d_free, self.d_free + t_d)

    def _abort(self, at: float) -> None:
        f = self.inflight
        if f is None:
            return
        self.inflight = None
        self._emit(TraceEvent("draft", "decode_one", f.start, at, self.round,
                              position=f.position, discarded=True))
        self._emit(TraceEvent("draft", "abort", at, at, self.round, position=f.position))
        self.d_free = at

    def _wait_ready(self, count: int, not_before: float) -> float:
        """Advance the draft until ``count`` tokens are ready; return when the last one was."""
        while len(self.ahead) < count:
            if self.inflight is not None:
                self._draft_until(self.inflight.end)
            else:
                if self._next_position() >= self.cap:
                    raise RuntimeError("draft blocked while the target waits for it")
                self._draft_until(max(self.d_free, not_before) + TIME_EPS * 2)
        return max(not_before, self.ahead[count - 1].ready)

    # phases --------------------------------------------------------------

    def sync_prefill(self) -> SchedulerState:
        """Both prefills start at 0; the draft fills its buffer while the target finishes."""
        if self._prefilled:
            raise RuntimeError("prefill already done")
        p = self.profile
        self._emit(TraceEvent("target", "prefill", 0.0, p.t_target_prefill, -1))
        t = 0.0
        if p.t_prune > 0:
            self._emit(TraceEvent("draft", "prune", 0.0, p.t_prune, -1))
            t = p.t_prune
        self._emit(TraceEvent("draft", "prefill", t, t + p.t_draft_prefill, -1))
        self.d_free = t + p.t_draft_prefill
        buffer = startup_buffer(p)
        self.cap = self.prompt_len + buffer
        self._draft_until(p.t_target_prefill)
        if len(self.ahead) < buffer:
            self._wait_ready(buffer, p.t_target_prefill)
        self.now = p.t_target_prefill
        self.phase = OPTIMISTIC if buffer > 0 else CONSERVATIVE
        self._prefilled = True
        return self.state

    @property
    def state(self) -> SchedulerState:
        return SchedulerState(
            mode=self.phase,
            committed=list(self.committed),
            draft_buffer=[a.token for a in self.ahead],
            round=self.round,
            prompt_len=self.prompt_len,
            pending_speculative=[self.inflight.token] if self.inflight else [],
        )

    def step(self) -> list[int]:
        """Run one target pass; returns the tokens it committed."""
        if not self._prefilled:
            self.sync_prefill()
        if self.phase == OPTIMISTIC:
            return self.step_optimistic()
        return self.step_conservative()

    def step_optimistic(self) -> list[int]:
        if self.phase != OPTIMISTIC:
            raise RuntimeError("scheduler is not in optimistic mode")
        T = self.now
        self._draft_until(T)
        if not self.speculate:
            return self._step_plain(T)
        ready = sum(1 for a in self.ahead if a.ready <= T + TIME_EPS)
        m = min(ready, self.gamma)
        L = len(self.committed)
        return self._verify(m, T, cap=L + m + self.gamma + 1)

    def step_conservative(self) -> list[int]:
        if self.phase != CONSERVATIVE:
            raise RuntimeError("scheduler is not in conservative mode")
        T = self.now
        if not self.speculate:
            self._draft_until(T)
            return self._step_plain(T)
        L = len(self.committed)
        if self.conservative == "single":
            k, cap = 1, L + max(self.gamma, 2)
        else:
            k, cap = self.gamma, L + 2 * self.gamma + 1
        self._set_cap(L + k, T)
        self._draft_until(T)
        start = self._wait_ready(k, T)
        return self._verify(k, start, cap=cap)

    def _step_plain(self, T: float) -> list[int]:
        # no drafting during verification: top the batch up to gamma, then verify
        L = len(self.committed)
        self._set_cap(max(L + self.gamma, self._next_position()), T)
        start = self._wait_ready(self.gamma, T) if len(self.ahead) < self.gamma else T
        return self._verify(self.gamma, start, cap=self._next_position())

    def _verify(self, m: int, start: float, cap: int) -> list[int]:
        L = len(self.committed)
        end = start + self.profile.t_target_verify
        batch = self.ahead[:m]
        self._set_cap(cap, start)
        self._draft_until(end)
        self._emit(TraceEvent("target", "verify_batch", start, end, self.round, tokens=m))

        ctx = list(self.committed)
        new: list[int] = []
        kind = None
        for i, a in enumerate(batch):
            p = self.target_m.next_dist(ctx)
            tok, ok = resolve(p, a.dist, a.token, L + i, self.target_rng, self.mode)
            new.append(tok)
            if not ok:
                kind = ExtraKind.CORRECTION
                self._discard(a.event)
                break
            ctx.append(tok)
        accepted = len(new) - (kind is not None)
        consumed = len(new)
        if kind is None:
            p = self.target_m.next_dist(ctx)
            if len(self.ahead) > m:
                probe = self.ahead[m]
                tok, ok = resolve(p, probe.dist, probe.token, L + m, self.target_rng, self.mode)
                kind = ExtraKind.PROBE_ACCEPTED if ok else ExtraKind.PROBE_REJECTED
                if not ok:
                    self._discard(probe.event)
                consumed += 1
            else:
                tok = bonus(p, ctx, self.target_rng, self.mode, self.draft_m, self.draft_rng)
                kind = ExtraKind.BONUS
            new.append(tok)

        rejected = kind in (ExtraKind.CORRECTION, ExtraKind.PROBE_REJECTED)
        leftover = self.ahead[consumed:]
        self.ahead = [] if rejected else leftover
        if rejected:
            for a in leftover:
                self._discard(a.event)
            self._abort(end)

        if self.limit is not None:
            new = new[: max(0, self.limit - (len(self.committed) - self.prompt_len))]
        self.committed.extend(new)
        self.trace.rounds.append(RoundRecord(self.round, self.phase, m, accepted, len(new),
                                             kind.value, start, end))
        self.round += 1
        self.now = end
        self.phase = CONSERVATIVE if rejected else OPTIMISTIC
        return new

    def run(self, max_new: int) -> tuple[list[int], ScheduleTrace]:
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        self.limit = max_new
        if not self._prefilled:
            self.sync_prefill()
        while len(self.committed) - self.prompt_len < max_new:
            self.step()
        self._finish()
        return self.committed[self.prompt_len:], self.trace

    def _finish(self) -> None:
        # work still running when the last pass ends never reaches the target
        self.inflight = None
        for a in self.ahead:
            self._discard(a.event)
        self.ahead = []
        self.trace.events.sort(key=lambda e: (e.virtual_start, e.worker != "target", e.virtual_end))


def run_vpsd(draft_m: ModelOracle, target_m: ModelOracle, prompt: Sequence[int], gamma: int,
             max_new: int, profile: LatencyProfile, rng: SeededRng | int = 0,
             mode: Mode = Mode.GREEDY, speculate: bool = True,
             conservative: str = "auto") -> tuple[list[int], ScheduleTrace]:
    """Overlapped speculative decoding on the virtual clock."""
    sched = VPSDScheduler(draft_m, target_m, prompt, gamma, profile, rng, mode, speculate, conservative)
    return sched.run(max_new)


# real threads ------------------------------------------------------------

@dataclass(frozen=True)
class _Proposal:
    position: int
    token: int
    dist: ProbDist
    context: tuple[int, ...]


@dataclass(frozen=True)
class _Verdict:
    committed: tuple[int, ...]
    cap: int
    stop: bool = False


class _DraftWorker(threading.Thread):
    """Drafts ahead of the committed prefix, up to the cap the coordinator sets."""

    def __init__(self, model: ModelOracle, prompt: Sequence[int], rng: SeededRng, mode: Mode,
                 profile: LatencyProfile, buffer: int, time_scale: float,
                 proposals: queue.Queue, verdicts: queue.Queue):
        super().__init__(daemon=True, name="draft-worker")
        self.model, self.rng, self.mode = model, rng, mode
        self.profile, self.time_scale = profile, time_scale
        self.seq = list(prompt)
        self.committed_len = len(prompt)
        self.cap = len(prompt) + buffer
        self.proposals, self.verdicts = proposals, verdicts
        self.stopped = False

    def _apply(self, v: _Verdict) -> None:
        if v.stop:
            self.stopped = True
            return
        c = list(v.committed)
        if self.seq[: len(c)] == c[: len(self.seq)]:
            self.seq = c + self.seq[len(c):]
        else:
            self.seq = c
        self.committed_len = len(c)
        self.cap = v.cap

    def _drain(self, block: bool = False) -> None:
        try:
            v = self.verdicts.get(block=block)
            self._apply(v)
            while not self.stopped:
                self._apply(self.verdicts.get_nowait())
        except queue.Empty:
            pass

    def _sleep(self, t: float) -> None:
        if self.time_scale > 0 and t > 0:
            time.sleep(t * self.time_scale)

    def run(self) -> None:
        try:
            self._sleep(self.profile.t_prune + self.profile.t_draft_prefill)
            while not self.stopped:
                self._drain()
                if self.stopped:
                    break
                if len(self.seq) >= self.cap:
                    self._drain(block=True)
                    continue
                ctx = tuple(self.seq)
                q = self.model.next_dist(ctx)
                x = propose(q, len(ctx), self.rng, self.mode)
                self._sleep(self.profile.t_draft_decode)
                # cancellation point: a verdict may have invalidated this token's context
                self._drain()
                if self.stopped or tuple(self.seq[: len(ctx)]) != ctx or len(self.seq) != len(ctx):
                    continue
                self.seq.append(x)
                self.proposals.put(_Proposal(len(ctx), x, q, ctx))
        except BaseException as exc:  # surfaced to the coordinator
            self.proposals.put(exc)


def run_vpsd_threaded(draft_m: ModelOracle, target_m: ModelOracle, prompt: Sequence[int],
                      gamma: int, max_new: int, profile: LatencyProfile,
                      rng: SeededRng | int = 0, mode: Mode = Mode.GREEDY,
                      time_scale: float = 0.0, timeout: float = 30.0,
                      conservative: str = "auto") -> tuple[list[int], RoundLog]:
    """Overlapped decoding with a real draft thread.

    The coordinator owns the committed sequence and runs the target; it talks
    to the draft worker through two single-producer single-consumer queues.
    ``time_scale`` converts profile units to seconds of sleep (0 runs as fast
    as possible).  Committed tokens match :func:`run_vpsd`; timing does not.
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    mode = Mode(mode)
    single = conservative_shape(gamma, profile, conservative) == "single"
    draft_rng, target_rng = role_streams(rng)
    proposals: queue.Queue = queue.Queue()
    verdicts: queue.Queue = queue.Queue()
    buffer = startup_buffer(profile)
    worker = _DraftWorker(draft_m, prompt, draft_rng, mode, profile, buffer, time_scale,
                          proposals, verdicts)
    committed = list(prompt)
    ahead: list[_Proposal] = []
    log = RoundLog(gamma=gamma, method="vpsd")
    phase = OPTIMISTIC if buffer > 0 else CONSERVATIVE
    deadline = time.monotonic() + timeout

    def take(item) -> None:
        if isinstance(item, BaseException):
            raise item
        expected = tuple(committed) + tuple(a.token for a in ahead)
        if item.position == len(expected) and item.context == expected:
            ahead.append(item)

    def drain(wait_for: int = 0) -> None:
        while True:
            try:
                block = len(ahead) < wait_for
                item = proposals.get(timeout=max(0.0, deadline - time.monotonic())) if block \
                    else proposals.get_nowait()
            except queue.Empty:
                if len(ahead) < wait_for:
                    raise TimeoutError("draft worker produced nothing before the deadline")
                return
            take(item)

    worker.start()
    try:
        if time_scale > 0:
            time.sleep(profile.t_target_prefill * time_scale)
        drain(wait_for=buffer)
        rnd = 0
        while len(committed) - len(prompt) < max_new:
            L = len(committed)
            if phase == CONSERVATIVE:
                m = 1 if single else gamma
                cap = L + max(gamma, 2) if single else L + 2 * gamma + 1
                verdicts.put(_Verdict(tuple(committed), cap))
                drain(wait_for=m)
            else:
                drain()
                m = min(len(ahead), gamma)
                verdicts.put(_Verdict(tuple(committed), L + m + gamma + 1))
            batch = ahead[:m]
            if time_scale > 0:
                time.sleep(profile.t_target_verify * time_scale)
            drain()
            ctx = list(committed)
            new: list[int] = []
            kind = None
            for i, a in enumerate(batch):
                p = target_m.next_dist(ctx)
                tok, ok = resolve(p, a.dist, a.token, L + i, target_rng, mode)
                new.append(tok)
                if not ok:
                    kind = ExtraKind.CORRECTION
                    break
                ctx.append(tok)
            accepted = len(new) - (kind is not None)
            if kind is None:
                p = target_m.next_dist(ctx)
                if len(ahead) > m:
                    tok, ok = resolve(p, ahead[m].dist, ahead[m].token, L + m, target_rng, mode)
                    kind = ExtraKind.PROBE_ACCEPTED if ok else ExtraKind.PROBE_REJECTED
                else:
                    tok = bonus(p, ctx, target_rng, mode, draft_m, draft_rng)
                    kind = ExtraKind.BONUS
                new.append(tok)
            new = new[: max_new - (L - len(prompt))]
            committed.extend(new)
            # keep only queued proposals that still extend the committed prefix
            kept = [a for a in ahead if a.position >= len(committed)
                    and a.context[: len(committed)] == tuple(committed)]
            ahead[:] = kept
            rejected = kind in (ExtraKind.CORRECTION, ExtraKind.PROBE_REJECTED)
            log.append(RoundRecord(rnd, phase, m, accepted, len(new), kind.value))
            rnd += 1
            phase = CONSERVATIVE if rejected else OPTIMISTIC
            verdicts.put(_Verdict(tuple(committed), len(committed) + gamma + 1))
    finally:
        verdicts.put(_Verdict((), 0, stop=True))
        worker.join(timeout=5.0)
    return committed[len(prompt):], log
