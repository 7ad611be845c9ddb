"""Edge-position statistics for a selected token set.

A token row counts as boundary when its center ``(r + 0.5) / R`` lies within
``band`` of the top or bottom edge.  The four-sided variant also applies the
same rule to columns.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .preserve import KeepSet


def _edge_1d(n: int, band: float) -> np.ndarray:
    centers = (np.arange(n) + 0.5) / n
    return (centers < band) | (centers > 1.0 - band)


def classify_boundary(rows: int, cols: int, band: float = 0.1, four_sided: bool = False) -> np.ndarray:
    """Boolean ``rows x cols`` mask of boundary positions."""
    if not 0.0 < band < 0.5:
        raise ValueError(f"band must be in (0, 0.5), got {band}")
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    mask = np.repeat(_edge_1d(rows, band)[:, None], cols, axis=1)
    if four_sided:
        mask |= _edge_1d(cols, band)[None, :]
    return mask


@dataclass(frozen=True)
class BiasReport:
    per_frame_boundary_share: tuple[float | None, ...]  # None where a frame has no selected token
    per_frame_selected: tuple[int, ...]
    per_frame_boundary_selected: tuple[int, ...]
    overall_share: float  # pooled over all selected tokens
    mean_frame_share: float  # unweighted mean over frames with a selection
    boundary_fraction_of_grid: float
    band: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame_index", "selected", "boundary_selected", "share"])
        for i, (n, b, s) in enumerate(zip(self.per_frame_selected, self.per_frame_boundary_selected,
                                          self.per_frame_boundary_share)):
            w.writerow([i, n, b, "" if s is None else repr(float(s))])
        return buf.getvalue()


def bias_report(keep: KeepSet, band: float = 0.1, four_sided: bool = False) -> BiasReport:
    if len(keep) == 0:
        raise ValueError("keep set is empty")
    frames, rows, cols = keep.shape
    edge = classify_boundary(rows, cols, band, four_sided)
    sel = keep.mask()
    n_sel = sel.sum(axis=(1, 2))
    n_edge = (sel & edge[None]).sum(axis=(1, 2))
    shares = tuple(float(b / n) if n else None for n, b in zip(n_sel, n_edge))
    present = [s for s in shares if s is not None]
    return BiasReport(
        per_frame_boundary_share=shares,
        per_frame_selected=tuple(int(n) for n in n_sel),
        per_frame_boundary_selected=tuple(int(b) for b in n_edge),
        overall_share=float(n_edge.sum() / n_sel.sum()),
        mean_frame_share=float(np.mean(present)),
        boundary_fraction_of_grid=float(edge.mean()),
        band=float(band),
    )
