"""Longitudinal confirmation of grid cells from per-frame detections.

Each frame is pushed ``displacement_ft`` forward along its heading (where the
object the camera sees most likely stands), bucketed into an 80 ft cell, and
appended to that cell's chronological history.  A cell is confirmed when a
window of ``window`` consecutive observations holds at least ``threshold``
positives.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError
from .geo import GridCell, GridConfig, PlanePoint, cells_of_arrays, displace_along_heading, project, project_arrays
from .ingest import FrameRecord


@dataclass(frozen=True, slots=True)
class Observation:
    captured_at: datetime
    detected: bool
    frame_id: str


@dataclass(frozen=True)
class CellHistory:
    cell: GridCell
    observations: tuple[Observation, ...]

    def __len__(self):
        return len(self.observations)


@dataclass(frozen=True)
class TaggingParams:
    window: int = 20
    threshold: int = 6

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError(f"window must be at least 1, got {self.window}")
        if not 1 <= self.threshold <= self.window:
            raise ConfigError(f"threshold must lie in [1, {self.window}], got {self.threshold}")


@dataclass(frozen=True)
class CellVerdict:
    cell: GridCell
    confirmed: bool
    first_confirmed_at: Optional[datetime]
    observation_count: int
    positive_count: int
    last_window_confirmed: bool
    insufficient_coverage: bool
    first_observed_at: Optional[datetime] = None

    def is_tagged(self, rule: str = "last") -> bool:
        """``rule="last"``: final window only; ``rule="any"``: any window in the history."""
        if rule == "last":
            return self.last_window_confirmed
        if rule == "any":
            return self.confirmed
        raise ValueError(f"unknown confirmation rule {rule!r}")


def observation_point(frame: FrameRecord, cfg: GridConfig) -> PlanePoint:
    return displace_along_heading(project(frame.location, cfg.origin, cfg.bounds), frame.heading, cfg.displacement_ft)


def observation_cells(frames: list[FrameRecord], cfg: GridConfig):
    """Vectorised cell assignment of displaced frame positions; returns ``(ix, iy)`` arrays."""
    if not frames:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    lat = np.fromiter((f.location.lat for f in frames), float, len(frames))
    lon = np.fromiter((f.location.lon for f in frames), float, len(frames))
    hdg = np.radians(np.fromiter((f.heading for f in frames), float, len(frames)))
    x, y = project_arrays(lat, lon, cfg.origin, cfg.bounds)
    x = x + cfg.displacement_ft * np.sin(hdg)
    y = y + cfg.displacement_ft * np.cos(hdg)
    return cells_of_arrays(x, y, cfg.cell_size_ft)


def build_histories(frames: Iterable[FrameRecord], cfg: GridConfig) -> dict[GridCell, CellHistory]:
    frames = list(frames)
    if any(a.sort_key() > b.sort_key() for a, b in zip(frames, frames[1:])):
        frames.sort(key=FrameRecord.sort_key)
    ix, iy = observation_cells(frames, cfg)
    lists: dict[GridCell, list[Observation]] = {}
    for f, cx, cy in zip(frames, ix.tolist(), iy.tolist()):
        lists.setdefault(GridCell(cx, cy), []).append(Observation(f.captured_at, f.detected, f.frame_id))
    return {c: CellHistory(c, tuple(obs)) for c, obs in lists.items()}


def confirm_cell(history: CellHistory, params: TaggingParams = TaggingParams()) -> CellVerdict:
    obs = history.observations
    n, w = len(obs), params.window
    flags = np.fromiter((o.detected for o in obs), dtype=np.int64, count=n)
    positives = int(flags.sum())
    first_seen = obs[0].captured_at if obs else None
    if n < w:
        return CellVerdict(history.cell, False, None, n, positives, False, True, first_seen)
    csum = np.concatenate(([0], np.cumsum(flags)))
    # window_sums[k] counts positives in obs[k : k + w], i.e. the window ending at index k + w - 1
    window_sums = csum[w:] - csum[:-w]
    hits = np.flatnonzero(window_sums >= params.threshold)
    confirmed = hits.size > 0
    first = obs[int(hits[0]) + w - 1].captured_at if confirmed else None
    last_ok = bool(window_sums[-1] >= params.threshold)
    return CellVerdict(history.cell, confirmed, first, n, positives, last_ok, False, first_seen)


def _confirm_batch(histories, params):
    return [confirm_cell(h, params) for h in histories]


def run_tagging(
    frames: Iterable[FrameRecord],
    cfg: GridConfig = GridConfig(),
    params: TaggingParams = TaggingParams(),
    workers: int = 1,
) -> list[CellVerdict]:
    """One verdict per non-empty cell, ordered by cell index."""
    histories = build_histories(frames, cfg)
    ordered = [histories[c] for c in sorted(histories)]
    if workers <= 1 or len(ordered) < 2:
        return _confirm_batch(ordered, params)
    step = -(-len(ordered) // workers)
    batches = [ordered[i:i + step] for i in range(0, len(ordered), step)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(_confirm_batch, batches, [params] * len(batches))
        return [v for part in parts for v in part]
