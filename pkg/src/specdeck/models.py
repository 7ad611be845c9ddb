"""Table-driven stand-in language models.

An oracle maps the last ``depth`` tokens of a prefix to a next-token
distribution.  Contexts are identified by a 64-bit hash built from the
splitmix64 finalizer, so the same context gets the same key in any
implementation that reproduces the mix.  Random oracles fill their table
lazily: the distribution for a context is a deterministic function of
``(seed, context hash)``.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .prob import MASK64, ProbDist

GOLDEN = 0x9E3779B97F4A7C15
FORMAT_TAG = "specdeck-oracle v1"


def splitmix64(x: int) -> int:
    """One step of the splitmix64 generator applied to ``x``."""
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def context_hash(prefix: Sequence[int], depth: int) -> int:
    """Hash of the last ``depth`` tokens; missing leading positions hash as 0, token ``t`` as ``t + 1``."""
    h = splitmix64(depth)
    tail = list(prefix[-depth:]) if depth > 0 else []
    padded = [0] * (depth - len(tail)) + [int(t) + 1 for t in tail]
    for v in padded:
        h = splitmix64(h ^ (v & MASK64))
    return h


def unit_from_hash(h: int) -> float:
    """Map a 64-bit value to [0, 1) using its top 53 bits."""
    return (h >> 11) * 2.0**-53


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass(eq=False)
class TableOracle:
    """Next-token distributions looked up by context hash.

    Lookup order: the explicit ``table``, then ``source`` (a function of the
    context hash whose results are memoized into the table), then
    ``fallback``.  With none of these matching, :class:`KeyError`.
    """

    vocab: int
    depth: int = 3
    table: dict[int, ProbDist] = field(default_factory=dict)
    fallback: ProbDist | None = None
    source: Callable[[int], np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        for d in self.table.values():
            self._check(d)
        if self.fallback is not None:
            self._check(self.fallback)
        self._lock = threading.Lock()

    def _check(self, d: ProbDist) -> None:
        if d.vocab != self.vocab:
            raise ValueError(f"stored distribution has vocab {d.vocab}, oracle has {self.vocab}")

    def key(self, prefix: Sequence[int]) -> int:
        return context_hash(prefix, self.depth)

    def dist_for_key(self, key: int) -> ProbDist:
        d = self.table.get(key)
        if d is not None:
            return d
        if self.source is not None:
            d = ProbDist(self.source(key))
            self._check(d)
            with self._lock:
                return self.table.setdefault(key, d)
        if self.fallback is not None:
            return self.fallback
        raise KeyError(f"no distribution for context key {key:#018x}")

    def next_dist(self, prefix: Sequence[int]) -> ProbDist:
        return self.dist_for_key(self.key(prefix))


def random_oracle(vocab: int, depth: int = 3, seed: int = 0, sharpness: float = 2.0) -> TableOracle:
    """Oracle whose per-context distribution is ``softmax(sharpness * N(0, I))``."""

    def source(key: int) -> np.ndarray:
        rng = np.random.default_rng([seed & MASK64, key])
        return _softmax(sharpness * rng.standard_normal(vocab))

    return TableOracle(vocab, depth, source=source)


@dataclass(eq=False)
class AgreementPair:
    target: TableOracle
    draft: TableOracle
    alpha: float
    seed: int

    def agrees(self, key: int) -> bool:
        """Whether the draft shares the target's argmax on this context."""
        return agreement_coin(self.seed, key) < self.alpha


def agreement_coin(seed: int, key: int) -> float:
    return unit_from_hash(splitmix64(key ^ splitmix64(seed ^ 0xA5A5A5A5A5A5A5A5)))


def make_pair(vocab: int, depth: int = 3, alpha: float = 0.8, seed: int = 0,
              mix: float = 0.7) -> AgreementPair:
    """A random target plus a draft agreeing with its argmax on a fraction ``alpha`` of contexts.

    The draft distribution is ``mix * target + (1 - mix) * noise`` with its
    maximum moved onto the target's argmax (agreeing context) or onto the
    target's second-ranked token (disagreeing context).  The per-context coin
    does not depend on ``alpha``, so agreement sets are nested as ``alpha``
    grows.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    target = random_oracle(vocab, depth, seed)

    def source(key: int) -> np.ndarray:
        p = target.dist_for_key(key).probs
        rng = np.random.default_rng([seed & MASK64, key, 1])
        noise = _softmax(2.0 * rng.standard_normal(vocab))
        base = mix * p + (1.0 - mix) * noise
        ranked = np.argsort(-p, kind="stable")
        want = ranked[0] if agreement_coin(seed, key) < alpha else ranked[1]
        top = int(np.argmax(base))
        base[top], base[want] = base[want], base[top]
        if np.count_nonzero(base == base[want]) > 1:
            # break an exact tie so argmax is unambiguous
            base[want] += 1e-9
        return base / base.sum()

    draft = TableOracle(vocab, depth, source=source)
    return AgreementPair(target, draft, float(alpha), int(seed))


def greedy_agreement(pair: AgreementPair, n_contexts: int = 10_000, seed: int = 1) -> float:
    """Fraction of random contexts on which draft and target argmax coincide."""
    rng = np.random.default_rng(seed)
    depth = pair.target.depth
    ctxs = rng.integers(0, pair.target.vocab, size=(n_contexts, max(depth, 1)))
    hits = 0
    for ctx in ctxs:
        prefix = ctx.tolist()
        hits += pair.target.next_dist(prefix).argmax() == pair.draft.next_dist(prefix).argmax()
    return hits / n_contexts


@dataclass(frozen=True, eq=False)
class OneHotOracle:
    """Deterministic model putting all mass on ``next_token(prefix)``."""

    vocab: int
    next_token: Callable[[list[int]], int]

    def next_dist(self, prefix: Sequence[int]) -> ProbDist:
        p = np.zeros(self.vocab)
        p[self.next_token(list(prefix))] = 1.0
        return ProbDist(p)


def oracle_to_json(oracle: TableOracle, contexts: Iterable[Sequence[int]] = ()) -> str:
    """Dump the oracle's table (after resolving ``contexts``) as canonical JSON."""
    for ctx in contexts:
        oracle.next_dist(ctx)
    entries = [
        {"key": f"{k:016x}", "probs": d.tolist()}
        for k, d in sorted(oracle.table.items())
    ]
    doc = {
        "format": FORMAT_TAG,
        "vocab": oracle.vocab,
        "depth": oracle.depth,
        "fallback": oracle.fallback.tolist() if oracle.fallback is not None else None,
        "entries": entries,
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def oracle_from_json(text: str) -> TableOracle:
    doc = json.loads(text)
    if doc.get("format") != FORMAT_TAG:
        raise ValueError(f"not an oracle dump (format={doc.get('format')!r})")
    table = {int(e["key"], 16): ProbDist(e["probs"]) for e in doc["entries"]}
    fb = doc.get("fallback")
    return TableOracle(int(doc["vocab"]), int(doc["depth"]), table,
                       ProbDist(fb) if fb is not None else None)
