"""Semantic-aware visual token preservation.

Three per-token scores over a ``F x R x C`` token grid are z-normalized per
frame, summed with equal weight, and the global top-k of the fused score is
kept:

* relevance: mean text-to-video cross-attention weight over layers, heads
  and text rows (softmax taken over the visual keys of each text row);
* temporal: ``1 - mean cosine`` with the same grid position in the adjacent
  frames;
* spatial: population variance of a token's cosine-similarity row inside its
  non-overlapping ``crop_side x crop_side`` crop (edge crops are smaller).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

CRITERIA = ("attn", "temp", "spa")
KEEP_FORMAT = "specdeck-keep v1"
FLAT_FRAME_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class VisualTokenGrid:
    """Token embeddings laid out as ``(frames, rows, cols, dim)``."""

    embeddings: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.embeddings)
        if e.ndim != 4:
            raise ValueError(f"embeddings must be 4-D (F, R, C, d), got shape {e.shape}")
        if min(e.shape) < 1:
            raise ValueError(f"all grid dimensions must be >= 1, got {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError("embeddings must be finite")
        object.__setattr__(self, "embeddings", e)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.embeddings.shape[:3])

    @property
    def frames(self) -> int:
        return self.embeddings.shape[0]

    @property
    def rows(self) -> int:
        return self.embeddings.shape[1]

    @property
    def cols(self) -> int:
        return self.embeddings.shape[2]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[3]

    @property
    def n_tokens(self) -> int:
        f, r, c = self.shape
        return f * r * c


@dataclass(frozen=True, eq=False)
class CrossAttentionInputs:
    """Per-layer, per-head text queries ``(N_L, H, L_txt, d_k)`` and visual keys ``(N_L, H, N_v, d_k)``."""

    text_queries: np.ndarray
    visual_keys: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.text_queries)
        k = np.asarray(self.visual_keys)
        if q.ndim != 4 or k.ndim != 4:
            raise ValueError("queries and keys must both be 4-D")
        if q.shape[0] != k.shape[0] or q.shape[1] != k.shape[1] or q.shape[3] != k.shape[3]:
            raise ValueError(f"query shape {q.shape} incompatible with key shape {k.shape}")
        if q.shape[2] < 1:
            raise ValueError("need at least one text query")
        if min(q.shape) < 1 or min(k.shape) < 1:
            raise ValueError("empty attention inputs")
        object.__setattr__(self, "text_queries", q)
        object.__setattr__(self, "visual_keys", k)

    @property
    def layers(self) -> int:
        return self.text_queries.shape[0]

    @property
    def heads(self) -> int:
        return self.text_queries.shape[1]

    @property
    def text_len(self) -> int:
        return self.text_queries.shape[2]

    @property
    def n_visual(self) -> int:
        return self.visual_keys.shape[2]

    @property
    def key_dim(self) -> int:
        return self.visual_keys.shape[3]


@dataclass(frozen=True, eq=False)
class RawScores:
    attn: np.ndarray
    temp: np.ndarray
    spa: np.ndarray

    def get(self, name: str) -> np.ndarray:
        return getattr(self, name)


@dataclass(frozen=True, eq=False)
class ScoreMap:
    raw_attn: np.ndarray
    raw_temp: np.ndarray
    raw_spa: np.ndarray
    norm_attn: np.ndarray
    norm_temp: np.ndarray
    norm_spa: np.ndarray
    fused: np.ndarray
    criteria: tuple[str, ...] = CRITERIA


@dataclass(frozen=True)
class KeepSet:
    """Retained token positions, sorted ascending by (frame, row, col)."""

    indices: tuple[tuple[int, int, int], ...]
    keep_ratio: float
    shape: tuple[int, int, int]

    def __post_init__(self):
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("duplicate indices in keep set")
        if list(self.indices) != sorted(self.indices):
            raise ValueError("keep set indices must be sorted")

    def __len__(self) -> int:
        return len(self.indices)

    def flat(self) -> np.ndarray:
        f, r, c = self.shape
        if not self.indices:
            return np.zeros(0, dtype=np.int64)
        idx = np.asarray(self.indices, dtype=np.int64)
        return (idx[:, 0] * r + idx[:, 1]) * c + idx[:, 2]

    def mask(self) -> np.ndarray:
        m = np.zeros(int(np.prod(self.shape)), dtype=bool)
        m[self.flat()] = True
        return m.reshape(self.shape)

    def to_json(self) -> str:
        return json.dumps({"format": KEEP_FORMAT, "shape": list(self.shape),
                           "keep_ratio": self.keep_ratio,
                           "indices": [list(i) for i in self.indices]}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> KeepSet:
        doc = json.loads(text)
        if doc.get("format") != KEEP_FORMAT:
            raise ValueError(f"not a keep-set document (format={doc.get('format')!r})")
        shape = tuple(int(v) for v in doc["shape"])
        idx = tuple(tuple(int(v) for v in i) for i in doc["indices"])
        for i in idx:
            if len(i) != 3 or not all(0 <= a < b for a, b in zip(i, shape)):
                raise ValueError(f"index {list(i)} outside shape {list(shape)}")
        return cls(idx, float(doc["keep_ratio"]), shape)

    @classmethod
    def from_flat(cls, flat, keep_ratio: float, shape) -> KeepSet:
        f, r, c = shape
        flat = np.sort(np.asarray(flat, dtype=np.int64))
        triples = tuple((int(i // (r * c)), int((i // c) % r), int(i % c)) for i in flat)
        return cls(triples, float(keep_ratio), (int(f), int(r), int(c)))


@dataclass(frozen=True, eq=False)
class PrunedTokens:
    embeddings: np.ndarray  # (k, d), ascending grid order
    positions: np.ndarray  # (k, 3) int (frame, row, col)


def keep_count(keep_ratio: float, n_tokens: int) -> int:
    """``round(keep_ratio * n_tokens)`` (half up), at least 1."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    return min(n_tokens, max(1, math.floor(keep_ratio * n_tokens + 0.5)))


def _softmax_last(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention_weights(xattn: CrossAttentionInputs) -> np.ndarray:
    """Row-softmax attention ``(N_L, H, L_txt, N_v)``; each row sums to one."""
    q = xattn.text_queries.astype(np.float64)
    k = xattn.visual_keys.astype(np.float64)
    logits = np.einsum("lhid,lhnd->lhin", q, k) / math.sqrt(xattn.key_dim)
    return _softmax_last(logits)


def score_attention(grid: VisualTokenGrid, xattn: CrossAttentionInputs) -> np.ndarray:
    if xattn.n_visual != grid.n_tokens:
        raise ValueError(
            f"attention inputs cover {xattn.n_visual} visual tokens, grid has {grid.n_tokens}"
        )
    w = attention_weights(xattn)
    return w.mean(axis=(0, 1, 2)).reshape(grid.shape)


def score_temporal(grid: VisualTokenGrid) -> np.ndarray:
    e = grid.embeddings.astype(np.float64)
    f = grid.frames
    if f == 1:
        # no adjacent frame: no evidence of redundancy either way
        return np.zeros(grid.shape)
    norms = np.linalg.norm(e, axis=-1)
    dots = np.einsum("frcd,frcd->frc", e[:-1], e[1:])
    denom = norms[:-1] * norms[1:]
    cos = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    total = np.zeros(grid.shape)
    count = np.zeros(f)
    total[:-1] += cos
    total[1:] += cos
    count[:-1] += 1
    count[1:] += 1
    return 1.0 - total / count[:, None, None]


def crop_slices(rows: int, cols: int, crop_side: int):
    """Yield ``(row_slice, col_slice)`` for every crop, edge crops truncated."""
    if crop_side < 1:
        raise ValueError("crop_side must be >= 1")
    for r0 in range(0, rows, crop_side):
        for c0 in range(0, cols, crop_side):
            yield slice(r0, min(r0 + crop_side, rows)), slice(c0, min(c0 + crop_side, cols))


def score_spatial(grid: VisualTokenGrid, crop_side: int = 5) -> np.ndarray:
    e = grid.embeddings.astype(np.float64)
    norms = np.linalg.norm(e, axis=-1, keepdims=True)
    unit = np.divide(e, norms, out=np.zeros_like(e), where=norms > 0)
    out = np.zeros(grid.shape)
    f = grid.frames
    for rs, cs in crop_slices(grid.rows, grid.cols, crop_side):
        block = unit[:, rs, cs, :]
        h, w = block.shape[1], block.shape[2]
        flat = block.reshape(f, h * w, grid.dim)
        sim = np.einsum("fmd,fkd->fmk", flat, flat)
        out[:, rs, cs] = sim.var(axis=2).reshape(f, h, w)
    return out


def score_tokens(grid: VisualTokenGrid, xattn: CrossAttentionInputs, crop_side: int = 5) -> RawScores:
    return RawScores(score_attention(grid, xattn), score_temporal(grid), score_spatial(grid, crop_side))


def normalize_per_frame(score: np.ndarray) -> np.ndarray:
    """Z-score each frame with population std; a constant frame maps to zeros.

    A frame counts as constant when its spread is at most ``1e-12`` of its
    largest magnitude, so rounding noise in mathematically equal scores is
    not blown up to unit variance.
    """
    s = np.asarray(score, dtype=np.float64)
    flat = s.reshape(s.shape[0], -1)
    out = np.zeros_like(flat)
    for i, row in enumerate(flat):
        if np.ptp(row) <= FLAT_FRAME_RTOL * np.max(np.abs(row)):
            continue
        mu = row.mean()
        sd = row.std()
        if sd > 0.0:
            out[i] = (row - mu) / sd
    return out.reshape(s.shape)


def select_top_k(score: np.ndarray, keep_ratio: float) -> KeepSet:
    """Global top-k by ``score``, ties broken by ascending (frame, row, col)."""
    s = np.asarray(score, dtype=np.float64)
    flat = s.reshape(-1)
    k = keep_count(keep_ratio, flat.size)
    order = np.lexsort((np.arange(flat.size), -flat))
    return KeepSet.from_flat(order[:k], keep_ratio, s.shape)


def fuse_and_select(raw: RawScores, keep_ratio: float = 0.1,
                    criteria: tuple[str, ...] = CRITERIA) -> tuple[ScoreMap, KeepSet]:
    """Normalize each raw score per frame, sum the chosen criteria, keep the top-k.

    ``criteria`` selects which scores enter the sum; the default uses all
    three, ``("attn",)`` gives attention-only selection.
    """
    unknown = set(criteria) - set(CRITERIA)
    if unknown or not criteria:
        raise ValueError(f"criteria must be a non-empty subset of {CRITERIA}, got {criteria}")
    norm = {name: normalize_per_frame(raw.get(name)) for name in CRITERIA}
    fused = np.zeros_like(norm["attn"])
    for name in ("attn", "spa", "temp"):
        if name in criteria:
            fused = fused + norm[name]
    smap = ScoreMap(
        raw.attn, raw.temp, raw.spa,
        norm["attn"], norm["temp"], norm["spa"],
        fused, tuple(c for c in CRITERIA if c in criteria),
    )
    return smap, select_top_k(fused, keep_ratio)


def preserve_tokens(grid: VisualTokenGrid, xattn: CrossAttentionInputs, keep_ratio: float = 0.1,
                    crop_side: int = 5, criteria: tuple[str, ...] = CRITERIA) -> tuple[ScoreMap, KeepSet]:
    return fuse_and_select(score_tokens(grid, xattn, crop_side), keep_ratio, criteria)


def prune_grid(grid: VisualTokenGrid, keep: KeepSet) -> PrunedTokens:
    """Retained embeddings in ascending grid order, with their positions."""
    if tuple(keep.shape) != grid.shape:
        raise ValueError(f"keep set shape {keep.shape} does not match grid {grid.shape}")
    pos = np.asarray(keep.indices, dtype=np.int64).reshape(-1, 3)
    if len(pos) and (np.any(pos < 0) or np.any(pos >= np.asarray(grid.shape))):
        raise IndexError("keep set index outside the grid")
    emb = grid.embeddings[pos[:, 0], pos[:, 1], pos[:, 2]]
    return PrunedTokens(emb, pos)
