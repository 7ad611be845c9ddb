"""Serial draft-then-verify speculative decoding.

Every committed token at sequence position ``n`` is decided from random
streams keyed by ``n`` (see :mod:`specdeck.prob`).  In stochastic mode the
bonus token after a fully accepted batch is drawn through the same coupled
draft/accept/residual construction as an ordinary position, which has law
``p`` exactly and makes the committed sequence independent of how positions
were grouped into rounds.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, Protocol, Sequence

from .prob import (
    ACCEPT,
    BONUS,
    PROPOSE,
    RESIDUAL,
    ProbDist,
    SeededRng,
    VocabularyMismatch,
    accept_prob,
    residual,
    role_streams,
    sample,
)


class Mode(str, Enum):
    GREEDY = "greedy"
    STOCHASTIC = "stochastic"


class ExtraKind(str, Enum):
    CORRECTION = "correction"
    BONUS = "bonus"
    # scheduler-only: the draft's next token was ready and was checked in the bonus slot
    PROBE_ACCEPTED = "probe_accepted"
    PROBE_REJECTED = "probe_rejected"


REJECTING = (ExtraKind.CORRECTION, ExtraKind.PROBE_REJECTED)


class ModelOracle(Protocol):
    vocab: int

    def next_dist(self, prefix: Sequence[int]) -> ProbDist: ...


@dataclass(frozen=True)
class DraftBatch:
    tokens: tuple[int, ...]
    dists: tuple[ProbDist, ...]

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ValueError("a draft batch needs at least one token")
        if len(self.tokens) != len(self.dists):
            raise ValueError("tokens and dists differ in length")

    @property
    def gamma(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class VerifyOutcome:
    accepted_count: int
    emitted: tuple[int, ...]
    extra_kind: ExtraKind

    def __post_init__(self):
        if len(self.emitted) != self.accepted_count + 1:
            raise ValueError("emitted must hold the accepted run plus one extra token")


@dataclass
class RoundRecord:
    """One target verification pass.

    ``gamma_used`` is the number of draft tokens sent for verification,
    ``emitted`` the number of tokens actually committed by the round (after
    final-round truncation), ``phase`` one of ``serial``, ``ar``,
    ``optimistic`` or ``conservative``.
    """

    round: int
    phase: str
    gamma_used: int
    accepted_count: int
    emitted: int
    extra_kind: str
    start: float | None = None
    end: float | None = None

    @property
    def rejected(self) -> bool:
        return self.extra_kind in (ExtraKind.CORRECTION.value, ExtraKind.PROBE_REJECTED.value)


@dataclass
class RoundLog:
    rounds: list[RoundRecord] = field(default_factory=list)
    gamma: int = 0
    method: str = "serial_sd"

    def append(self, rec: RoundRecord) -> None:
        self.rounds.append(rec)

    def __len__(self) -> int:
        return len(self.rounds)

    def __iter__(self):
        return iter(self.rounds)

    @property
    def tokens_emitted(self) -> int:
        return sum(r.emitted for r in self.rounds)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.rounds)

    @classmethod
    def from_jsonl(cls, text: str, gamma: int = 0, method: str = "serial_sd") -> RoundLog:
        rounds = [RoundRecord(**json.loads(line)) for line in text.splitlines() if line.strip()]
        return cls(rounds, gamma=gamma, method=method)


def propose(q: ProbDist, position: int, draft_rng: SeededRng, mode: Mode) -> int:
    """The draft token for ``position`` under draft distribution ``q``."""
    if Mode(mode) is Mode.GREEDY:
        return q.argmax()
    return sample(q, draft_rng.at(position, PROPOSE))


def resolve(p: ProbDist, q: ProbDist, x: int, position: int,
            target_rng: SeededRng, mode: Mode) -> tuple[int, bool]:
    """Verify draft token ``x`` at ``position``; returns (committed token, accepted)."""
    if p.vocab != q.vocab:
        raise VocabularyMismatch(f"target vocab {p.vocab} != draft vocab {q.vocab}")
    if Mode(mode) is Mode.GREEDY:
        best = p.argmax()
        return best, x == best
    u = target_rng.at(position, ACCEPT).uniform()
    if u < accept_prob(p, q, x):
        return x, True
    return sample(residual(p, q), target_rng.at(position, RESIDUAL)), False


def bonus(p: ProbDist, prefix: Sequence[int], target_rng: SeededRng, mode: Mode,
          draft_model: ModelOracle | None = None,
          draft_rng: SeededRng | None = None) -> int:
    """The extra token after a fully accepted batch.

    Stochastic mode with a draft model available uses the coupled
    construction (propose from the draft, then verify), which yields the same
    token the scheduler would commit had the draft already proposed this
    position.
    """
    if Mode(mode) is Mode.GREEDY:
        return p.argmax()
    position = len(prefix)
    if draft_model is None or draft_rng is None:
        return sample(p, target_rng.at(position, BONUS))
    q = draft_model.next_dist(prefix)
    x = propose(q, position, draft_rng, mode)
    return resolve(p, q, x, position, target_rng, mode)[0]


def draft(model: ModelOracle, prefix: Sequence[int], gamma: int, rng: SeededRng,
          mode: Mode = Mode.STOCHASTIC) -> DraftBatch:
    """Autoregressively propose ``gamma`` tokens after ``prefix``."""
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    ctx = list(prefix)
    tokens, dists = [], []
    for _ in range(gamma):
        q = model.next_dist(ctx)
        x = propose(q, len(ctx), rng, mode)
        tokens.append(x)
        dists.append(q)
        ctx.append(x)
    return DraftBatch(tuple(tokens), tuple(dists))


def verify(target: ModelOracle, prefix: Sequence[int], batch: DraftBatch, rng: SeededRng,
           mode: Mode = Mode.STOCHASTIC, *, draft_model: ModelOracle | None = None,
           draft_rng: SeededRng | None = None) -> VerifyOutcome:
    """Check ``batch`` against the target, stopping at the first rejection."""
    ctx = list(prefix)
    for i, (x, q) in enumerate(zip(batch.tokens, batch.dists)):
        p = target.next_dist(ctx)
        token, ok = resolve(p, q, x, len(ctx), rng, mode)
        if not ok:
            return VerifyOutcome(i, tuple(batch.tokens[:i]) + (token,), ExtraKind.CORRECTION)
        ctx.append(x)
    p = target.next_dist(ctx)
    extra = bonus(p, ctx, rng, mode, draft_model, draft_rng)
    return VerifyOutcome(batch.gamma, tuple(batch.tokens) + (extra,), ExtraKind.BONUS)


def run_serial_sd(draft_m: ModelOracle, target_m: ModelOracle, prompt: Sequence[int],
                  gamma: int, max_new: int, mode: Mode = Mode.GREEDY,
                  rng: SeededRng | int = 0) -> tuple[list[int], RoundLog]:
    """Draft ``gamma`` tokens, verify them in one target pass, repeat.

    Returns the ``max_new`` generated tokens (prompt excluded) and the round
    log.  Tokens a final round would emit beyond ``max_new`` are dropped.
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    draft_rng, target_rng = role_streams(rng)
    seq = list(prompt)
    out: list[int] = []
    log = RoundLog(gamma=gamma, method="serial_sd")
    while len(out) < max_new:
        batch = draft(draft_m, seq, gamma, draft_rng, mode)
        outcome = verify(target_m, seq, batch, target_rng, mode,
                         draft_model=draft_m, draft_rng=draft_rng)
        kept = outcome.emitted[: max_new - len(out)]
        out.extend(kept)
        seq.extend(kept)
        log.append(RoundRecord(len(log), "serial", gamma, outcome.accepted_count,
                               len(kept), outcome.extra_kind.value))
    return out, log


def run_autoregressive(target_m: ModelOracle, prompt: Sequence[int], max_new: int,
                       mode: Mode = Mode.GREEDY, rng: SeededRng | int = 0,
                       draft_m: ModelOracle | None = None) -> tuple[list[int], RoundLog]:
    """Target-only decoding, one token per pass.

    With ``draft_m`` given in stochastic mode each token is drawn through the
    coupled construction, reproducing what the speculative decoders commit
    for the same seed; without it tokens are plain samples from the target.
    """
    draft_rng, target_rng = role_streams(rng)
    seq = list(prompt)
    out: list[int] = []
    log = RoundLog(gamma=0, method="ar")
    for i in range(max_new):
        p = target_m.next_dist(seq)
        tok = bonus(p, seq, target_rng, mode, draft_m, draft_rng)
        out.append(tok)
        seq.append(tok)
        log.append(RoundRecord(i, "ar", 0, 0, 1, ExtraKind.BONUS.value))
    return out, log


def iter_rounds(log: RoundLog | Iterable[RoundRecord]) -> list[RoundRecord]:
    return list(log.rounds if isinstance(log, RoundLog) else log)
