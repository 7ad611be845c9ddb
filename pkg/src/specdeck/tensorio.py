"""Little-endian binary containers for token grids and attention inputs.

``VTG1``: magic, then ``u32`` F, R, C, d, then ``F*R*C*d`` float32 values in
C order.  Score maps are written as VTG1 with ``d = 1``.

``XAT1``: magic, then ``u32`` N_L, H, L_txt, N_v, d_k, then the text queries
``(N_L, H, L_txt, d_k)`` followed by the visual keys ``(N_L, H, N_v, d_k)``,
all float32 in C order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .preserve import CrossAttentionInputs, VisualTokenGrid

VTG_MAGIC = b"VTG1"
XAT_MAGIC = b"XAT1"
F32 = np.dtype("<f4")


class FormatError(ValueError):
    """A tensor file is malformed; the message names the file."""


def _read(path: Path | str, magic: bytes, n_dims: int) -> tuple[tuple[int, ...], np.ndarray]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    head = 4 + 4 * n_dims
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < head:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f"<{n_dims}I", raw[4:head])
    body = np.frombuffer(raw, dtype=F32, offset=head) if len(raw) > head else np.zeros(0, F32)
    if (len(raw) - head) % 4:
        raise FormatError(f"{path}: payload is not a whole number of float32 values")
    return dims, body


def write_grid(path: Path | str, data) -> None:
    """Write a grid (or any ``(F, R, C[, d])`` array) as VTG1."""
    arr = data.embeddings if isinstance(data, VisualTokenGrid) else np.asarray(data)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise ValueError(f"expected a 3-D or 4-D array, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(VTG_MAGIC + struct.pack("<4I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=F32).tobytes())


def read_grid(path: Path | str) -> VisualTokenGrid:
    dims, body = _read(path, VTG_MAGIC, 4)
    if body.size != int(np.prod(dims)):
        raise FormatError(f"{path}: header says {dims} but payload holds {body.size} values")
    return VisualTokenGrid(body.reshape(dims).copy())


def read_scores(path: Path | str) -> np.ndarray:
    """A VTG1 score dump (``d = 1``) as an ``(F, R, C)`` float array."""
    g = read_grid(path)
    if g.dim != 1:
        raise FormatError(f"{path}: score file must have d=1, got d={g.dim}")
    return g.embeddings[..., 0]


def write_xattn(path: Path | str, xattn: CrossAttentionInputs) -> None:
    q, k = xattn.text_queries, xattn.visual_keys
    dims = (xattn.layers, xattn.heads, xattn.text_len, xattn.n_visual, xattn.key_dim)
    with open(path, "wb") as fh:
        fh.write(XAT_MAGIC + struct.pack("<5I", *dims))
        fh.write(np.ascontiguousarray(q, dtype=F32).tobytes())
        fh.write(np.ascontiguousarray(k, dtype=F32).tobytes())


def read_xattn(path: Path | str) -> CrossAttentionInputs:
    (n_l, h, l_txt, n_v, d_k), body = _read(path, XAT_MAGIC, 5)
    nq, nk = n_l * h * l_txt * d_k, n_l * h * n_v * d_k
    if body.size != nq + nk:
        raise FormatError(f"{path}: header implies {nq + nk} values, payload holds {body.size}")
    q = body[:nq].reshape(n_l, h, l_txt, d_k).copy()
    k = body[nq:].reshape(n_l, h, n_v, d_k).copy()
    try:
        return CrossAttentionInputs(q, k)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
