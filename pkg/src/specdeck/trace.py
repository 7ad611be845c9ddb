"""Timed worker events produced by the schedulers."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .speculative import RoundRecord

WORKERS = ("draft", "target")
ACTIONS = ("prune", "prefill", "decode_one", "verify_batch", "abort")
OVERLAP_TOL = 1e-9


class TraceError(ValueError):
    def __init__(self, message: str, round_index: int | None = None):
        super().__init__(message if round_index is None else f"round {round_index}: {message}")
        self.round_index = round_index


@dataclass(frozen=True)
class TraceEvent:
    worker: str
    action: str
    virtual_start: float
    virtual_end: float
    round: int  # target pass the event belongs to; -1 before the first pass
    position: int | None = None  # sequence position of a drafted token
    discarded: bool = False  # drafted work later thrown away
    tokens: int | None = None  # batch size of a verify pass

    @property
    def duration(self) -> float:
        return self.virtual_end - self.virtual_start


@dataclass
class ScheduleTrace:
    events: list[TraceEvent] = field(default_factory=list)
    rounds: list[RoundRecord] = field(default_factory=list)
    gamma: int = 0
    method: str = "vpsd"

    def worker_events(self, worker: str) -> list[TraceEvent]:
        return sorted((e for e in self.events if e.worker == worker),
                      key=lambda e: (e.virtual_start, e.virtual_end))

    @property
    def tokens_emitted(self) -> int:
        return sum(r.emitted for r in self.rounds)

    def target_prefill_end(self) -> float:
        ends = [e.virtual_end for e in self.events if e.worker == "target" and e.action == "prefill"]
        return max(ends, default=0.0)

    def end_time(self) -> float:
        verifies = [e.virtual_end for e in self.events if e.action == "verify_batch"]
        if verifies:
            return max(verifies)
        return max((e.virtual_end for e in self.events if e.worker == "target"), default=0.0)

    def target_idle_after_prefill(self) -> float:
        """Gaps in target activity between the end of its prefill and its last verify."""
        t = self.target_prefill_end()
        idle = 0.0
        for e in self.worker_events("target"):
            if e.action != "verify_batch":
                continue
            if e.virtual_start > t:
                idle += e.virtual_start - t
            t = max(t, e.virtual_end)
        return idle

    def validate(self) -> None:
        """Raise :class:`TraceError` for malformed events or overlapping work on one worker."""
        for e in self.events:
            if e.worker not in WORKERS:
                raise TraceError(f"unknown worker {e.worker!r}", e.round)
            if e.action not in ACTIONS:
                raise TraceError(f"unknown action {e.action!r}", e.round)
            if not e.virtual_end >= e.virtual_start:
                raise TraceError(f"event ends before it starts ({e.virtual_start} > {e.virtual_end})", e.round)
        for w in WORKERS:
            prev = None
            for e in self.worker_events(w):
                if prev is not None and e.virtual_start < prev.virtual_end - OVERLAP_TOL:
                    raise TraceError(f"{w} events overlap at t={e.virtual_start}", e.round)
                prev = e
        passes = [e.round for e in self.events if e.action == "verify_batch"]
        if len(passes) != len(set(passes)):
            raise TraceError("more than one verify_batch in a round",
                             next(r for r in passes if passes.count(r) > 1))
        if len(passes) != len(self.rounds):
            raise TraceError(f"{len(passes)} verify passes but {len(self.rounds)} round records")

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "meta", "gamma": self.gamma, "method": self.method}, sort_keys=True)]
        lines += [json.dumps({"type": "event", **asdict(e)}, sort_keys=True) for e in self.events]
        lines += [json.dumps({"type": "round", **asdict(r)}, sort_keys=True) for r in self.rounds]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> ScheduleTrace:
        tr = cls()
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                kind = obj.pop("type")
            except (json.JSONDecodeError, KeyError) as exc:
                raise TraceError(f"line {n}: not a trace record ({exc})") from exc
            if kind == "meta":
                tr.gamma, tr.method = int(obj["gamma"]), str(obj["method"])
            elif kind == "event":
                tr.events.append(TraceEvent(**obj))
            elif kind == "round":
                tr.rounds.append(RoundRecord(**obj))
            else:
                raise TraceError(f"line {n}: unknown record type {kind!r}")
        return tr


GLYPHS = {"prune": "x", "prefill": "P", "decode_one": "d", "verify_batch": "V", "abort": "!"}


def render_timeline(trace: ScheduleTrace, width: int = 100) -> str:
    """One text row per worker; each column covers ``end_time / width`` time units.

    ``d`` marks drafting, ``z`` drafting later discarded, ``V`` verification,
    ``P`` prefill, ``x`` pruning, ``!`` an abort and ``.`` idle time.
    """
    end = max((e.virtual_end for e in trace.events), default=0.0)
    if end <= 0:
        return "draft  |\ntarget |\n"
    scale = width / end
    rows = []
    for w in WORKERS:
        cells = ["."] * width
        for e in trace.worker_events(w):
            a = min(width - 1, int(e.virtual_start * scale))
            b = max(a + 1, min(width, int(round(e.virtual_end * scale))))
            glyph = "z" if e.discarded else GLYPHS[e.action]
            if e.action == "abort":
                b = a + 1
            for i in range(a, b):
                cells[i] = glyph
        rows.append(f"{w:<6} |{''.join(cells)}|")
    rows.append(f"{'':6}  0{'':{max(width - 1 - len(f'{end:g}'), 0)}}{end:g}")
    return "\n".join(rows) + "\n"
