"""Probability vectors, keyed random streams and the speculative-sampling rule.

Randomness discipline
---------------------
A :class:`SeededRng` is a PCG64 stream identified by ``(seed, key)``.  Child
streams are derived with :meth:`SeededRng.at`, which appends integers to the
key through numpy's ``SeedSequence.spawn_key``; a child never shares state
with its parent.  The decoders in this package draw every random number from a
child keyed by ``(role, position, purpose)``, so the value used to decide the
token at a given sequence position does not depend on how draft and target
work was interleaved.  That is what lets the serial loop, the virtual-clock
scheduler and the threaded executor commit identical tokens for one seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MASK64 = (1 << 64) - 1

# role keys
DRAFT = 0
TARGET = 1
VERIFIER = 2

# purpose keys inside a role stream
PROPOSE = 0
ACCEPT = 1
RESIDUAL = 2
BONUS = 3

SUM_TOL = 1e-9
RENORM_TOL = 1e-6


class VocabularyMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ProbDist:
    """A probability vector over a vocabulary of ``V >= 2`` tokens.

    Inputs whose sum is off by more than ``1e-9`` but at most ``1e-6`` are
    renormalized; anything further off is rejected.  Vectors already within
    ``1e-9`` are stored unchanged, so a dump and reload is bit-exact.  Use :meth:`from_weights` or :meth:`from_logits` for
    unnormalized inputs.
    """

    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64).reshape(-1)
        if p.size < 2:
            raise ValueError(f"vocabulary size must be >= 2, got {p.size}")
        if not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite")
        if np.any(p < 0):
            raise ValueError("probabilities must be non-negative")
        total = float(p.sum())
        if abs(total - 1.0) > RENORM_TOL:
            raise ValueError(f"probabilities sum to {total!r}, not 1")
        if abs(total - 1.0) > SUM_TOL:
            p = p / total
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_weights(cls, weights) -> ProbDist:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        s = w.sum()
        if s <= 0:
            raise ValueError("weights sum to zero")
        return cls(w / s)

    @classmethod
    def from_logits(cls, logits, temperature: float = 1.0) -> ProbDist:
        z = np.asarray(logits, dtype=np.float64).reshape(-1) / temperature
        z = z - z.max()
        e = np.exp(z)
        return cls(e / e.sum())

    @property
    def vocab(self) -> int:
        return self.probs.size

    def __len__(self) -> int:
        return self.probs.size

    def __getitem__(self, token):
        return self.probs[token]

    def argmax(self) -> int:
        # np.argmax returns the first maximum: lowest token id wins ties
        return int(np.argmax(self.probs))

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.probs)

    def tolist(self) -> list[float]:
        return self.probs.tolist()


class SeededRng:
    """Deterministic uniform stream keyed by ``(seed, key)``.

    Two instances with the same seed and key yield the same draws.  The
    underlying generator is created lazily, so deriving many children with
    :meth:`at` is cheap until one of them is drawn from.
    """

    __slots__ = ("seed", "key", "_gen")

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed) & MASK64
        self.key = tuple(int(k) for k in key)
        self._gen = None

    def _generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def uniform(self) -> float:
        """One draw from [0, 1)."""
        return float(self._generator().random())

    def uniforms(self, n: int) -> np.ndarray:
        return self._generator().random(n)

    def normal(self, size) -> np.ndarray:
        return self._generator().standard_normal(size)

    def integers(self, low: int, high: int, size=None):
        return self._generator().integers(low, high, size=size)

    def at(self, *key: int) -> SeededRng:
        return SeededRng(self.seed, self.key + tuple(key))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, key={self.key})"


def role_streams(rng: SeededRng | int) -> tuple[SeededRng, SeededRng]:
    """The (draft, target) stream pair used by every decoder."""
    root = rng if isinstance(rng, SeededRng) else SeededRng(rng)
    return root.at(DRAFT), root.at(TARGET)


def inverse_cdf(dist: ProbDist, u):
    """Map uniform draw(s) ``u`` in [0, 1) to token id(s).

    Tokens with zero probability are never returned, even when rounding in
    the cumulative sum leaves its last entry slightly below ``u``.
    """
    cdf = dist.cdf()
    idx = np.searchsorted(cdf, u, side="right")
    last = int(np.flatnonzero(dist.probs > 0)[-1])
    return np.minimum(idx, last)


def sample(dist: ProbDist, rng: SeededRng) -> int:
    """Draw one token from ``dist``, consuming exactly one uniform from ``rng``."""
    return int(inverse_cdf(dist, rng.uniform()))


def _check_vocab(p: ProbDist, q: ProbDist) -> None:
    if p.vocab != q.vocab:
        raise VocabularyMismatch(f"vocabulary sizes differ: {p.vocab} vs {q.vocab}")


def accept_prob(p: ProbDist, q: ProbDist, x: int) -> float:
    """Probability of accepting draft token ``x`` drawn from ``q`` under target ``p``.

    ``min(1, p[x] / q[x])``; a token with ``q[x] == 0`` could not have been
    drafted, and is accepted so the function stays total.
    """
    _check_vocab(p, q)
    if not 0 <= x < p.vocab:
        raise IndexError(f"token {x} outside vocabulary of size {p.vocab}")
    px, qx = p.probs[x], q.probs[x]
    if qx == 0.0 or px >= qx:
        return 1.0
    return float(px / qx)


def residual(p: ProbDist, q: ProbDist) -> ProbDist:
    """``norm(max(0, p - q))``, or ``p`` itself when that is identically zero."""
    _check_vocab(p, q)
    diff = np.maximum(p.probs - q.probs, 0.0)
    total = diff.sum()
    if total <= 0.0:
        return p
    return ProbDist(diff / total)


def speculative_sample(p: ProbDist, q: ProbDist, u_draft, u_accept, u_residual):
    """One speculative-sampling step driven by explicit uniforms.

    Draft ``x = F_q^{-1}(u_draft)``, accept when ``u_accept < accept_prob``,
    otherwise emit ``F_r^{-1}(u_residual)`` with ``r = residual(p, q)``.
    Works elementwise on arrays of uniforms.  Returns ``(token, accepted)``.
    """
    _check_vocab(p, q)
    x = inverse_cdf(q, u_draft)
    px = p.probs[x]
    qx = q.probs[x]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where((qx == 0.0) | (px >= qx), 1.0, px / np.where(qx == 0.0, 1.0, qx))
    accepted = np.asarray(u_accept) < ratio
    fallback = inverse_cdf(residual(p, q), u_residual)
    token = np.where(accepted, x, fallback)
    if np.ndim(token) == 0:
        return int(token), bool(accepted)
    return token, accepted
