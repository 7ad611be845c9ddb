"""Synthetic video token grids with matching cross-attention inputs.

Scenarios:

``static_background``
    one random base frame repeated, plus a ``patch x patch`` block at rows
    3-4 whose content is redrawn every frame.
``moving_object``
    static base frame with a fixed-content block that moves one column to the
    right per frame (wrapping).
``boundary_bias``
    static background with a central moving block; the keys of the first and
    last row are multiplied by ``boundary_scale``, so attention alone favors
    the top and bottom edges regardless of content.
``uniform_noise``
    every token independent noise; nothing to find.

Visual keys are per-layer, per-head random projections of the token
embeddings; text queries are independent noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .preserve import CrossAttentionInputs, VisualTokenGrid

SCENARIOS = ("static_background", "moving_object", "boundary_bias", "uniform_noise")


@dataclass(frozen=True)
class GridParams:
    layers: int = 2
    heads: int = 2
    text_len: int = 4
    key_dim: int = 8
    patch: int = 2
    patch_row: int = 3
    boundary_scale: float = 3.0


def _patch_origin(rows: int, cols: int, patch: int, row: int) -> tuple[int, int, int]:
    size = max(1, min(patch, rows, cols))
    r0 = min(max(row, 0), rows - size)
    c0 = (cols - size) // 2
    return r0, c0, size


def make_synthetic_grid(frames: int, rows: int, cols: int, dim: int, scenario: str,
                        seed: int = 0, params: GridParams | None = None
                        ) -> tuple[VisualTokenGrid, CrossAttentionInputs]:
    if min(frames, rows, cols, dim) < 1:
        raise ValueError("all grid dimensions must be >= 1")
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    prm = params or GridParams()
    rng = np.random.default_rng([seed, SCENARIOS.index(scenario)])

    if scenario == "uniform_noise":
        emb = rng.standard_normal((frames, rows, cols, dim))
    else:
        base = rng.standard_normal((rows, cols, dim))
        emb = np.repeat(base[None], frames, axis=0)
        r0, c0, size = _patch_origin(rows, cols, prm.patch, prm.patch_row)
        if scenario == "static_background":
            for f in range(frames):
                emb[f, r0:r0 + size, c0:c0 + size] = rng.standard_normal((size, size, dim))
        else:
            if scenario == "boundary_bias":
                r0 = (rows - size) // 2
            obj = rng.standard_normal((size, size, dim))
            for f in range(frames):
                for dc in range(size):
                    emb[f, r0:r0 + size, (c0 + f + dc) % cols] = obj[:, dc]

    n_v = frames * rows * cols
    flat = emb.reshape(n_v, dim)
    proj = rng.standard_normal((prm.layers, prm.heads, dim, prm.key_dim)) / np.sqrt(dim)
    keys = np.einsum("nd,lhdk->lhnk", flat, proj)
    if scenario == "boundary_bias":
        rows_of = (np.arange(n_v) // cols) % rows
        edge = (rows_of == 0) | (rows_of == rows - 1)
        keys[:, :, edge, :] *= prm.boundary_scale
    queries = rng.standard_normal((prm.layers, prm.heads, prm.text_len, prm.key_dim))
    return VisualTokenGrid(emb), CrossAttentionInputs(queries, keys)
