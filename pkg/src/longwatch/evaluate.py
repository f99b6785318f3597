"""Matching confirmed cells against the permit registry."""

from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field
from datetime import date
from typing import Iterable, Optional

import numpy as np

from .areas import UNASSIGNED, Area, AreaIndex
from .errors import InvariantViolation
from .geo import GeoPoint, GridCell, GridConfig, PlanePoint, cell_center, cells_in_region, project, project_arrays, unproject
from .ingest import BOROUGH_ORDER, FrameRecord, PermitRecord, filter_active
from .tagging import CellVerdict

MIN_COVERAGE_FRAMES = 20


@dataclass(frozen=True)
class PermitRegion:
    permit: PermitRecord
    cells: frozenset
    frames_within_radius: int


def frames_within_radius(frames: Iterable[FrameRecord], permits: list[PermitRecord], cfg: GridConfig) -> list[int]:
    """Number of frames whose camera position lies within ``visibility_radius_ft`` of each permit."""
    frames = list(frames)
    if not frames or not permits:
        return [0] * len(permits)
    r = cfg.visibility_radius_ft
    fx, fy = project_arrays(
        [f.location.lat for f in frames], [f.location.lon for f in frames], cfg.origin, cfg.bounds
    )
    bx = np.floor(fx / r).astype(np.int64)
    by = np.floor(fy / r).astype(np.int64)
    buckets: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, key in enumerate(zip(bx.tolist(), by.tolist())):
        buckets[key].append(i)
    arrays = {k: np.asarray(v) for k, v in buckets.items()}
    counts = []
    for p in permits:
        c = project(p.location, cfg.origin, cfg.bounds)
        kx, ky = math.floor(c.x / r), math.floor(c.y / r)
        n = 0
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                idx = arrays.get((kx + dx, ky + dy))
                if idx is not None:
                    d2 = (fx[idx] - c.x) ** 2 + (fy[idx] - c.y) ** 2
                    n += int(np.count_nonzero(d2 <= r * r))
        counts.append(n)
    return counts


def permit_regions(permits: list[PermitRecord], frames, cfg: GridConfig) -> list[PermitRegion]:
    counts = frames_within_radius(frames, permits, cfg)
    return [
        PermitRegion(p, frozenset(cells_in_region(project(p.location, cfg.origin, cfg.bounds), cfg)), n)
        for p, n in zip(permits, counts)
    ]


@dataclass
class Coverage:
    in_scope: list[PermitRecord]
    out_of_scope: list[PermitRecord]
    frame_counts: dict[str, int]


def coverage_ceiling(frames, permits: Iterable[PermitRecord], cfg: GridConfig, min_frames: int = MIN_COVERAGE_FRAMES) -> Coverage:
    """Split permits by whether the data could ever have confirmed them.

    A permit is out of scope when fewer than ``min_frames`` camera positions
    fall within ``visibility_radius_ft`` of it.
    """
    permits = list(permits)
    counts = frames_within_radius(frames, permits, cfg)
    inside, outside = [], []
    for p, n in zip(permits, counts):
        (inside if n >= min_frames else outside).append(p)
    return Coverage(inside, outside, {p.permit_id: n for p, n in zip(permits, counts)})


def region_index(permits: Iterable[PermitRecord], cfg: GridConfig) -> dict[GridCell, list[str]]:
    index: dict[GridCell, list[str]] = defaultdict(list)
    for p in permits:
        for c in cells_in_region(project(p.location, cfg.origin, cfg.bounds), cfg):
            index[c].append(p.permit_id)
    return index


def tagged_cells(verdicts: Iterable[CellVerdict], rule: str = "last") -> set[GridCell]:
    return {v.cell for v in verdicts if v.is_tagged(rule)}


def match_confirmations(
    verdicts: Iterable[CellVerdict], permits: Iterable[PermitRecord], cfg: GridConfig, rule: str = "last"
) -> tuple[set[str], set[GridCell]]:
    """Permits with a confirmed cell in their region, and confirmed cells outside every region.

    A cell inside several overlapping regions credits all of them.
    """
    index = region_index(permits, cfg)
    confirmed_permits: set[str] = set()
    unmatched: set[GridCell] = set()
    for cell in tagged_cells(verdicts, rule):
        owners = index.get(cell)
        if owners:
            confirmed_permits.update(owners)
        else:
            unmatched.add(cell)
    return confirmed_permits, unmatched


@dataclass(frozen=True)
class Cluster:
    cells: tuple[GridCell, ...]
    centroid: PlanePoint
    location: GeoPoint


_NEIGHBOURS = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if dx or dy]


def cluster_unpermitted(cells: Iterable[GridCell], cfg: GridConfig = GridConfig()) -> list[Cluster]:
    """8-connected components of cells; each component stands for one structure."""
    todo = set(cells)
    clusters = []
    for start in sorted(todo):
        if start not in todo:
            continue
        todo.discard(start)
        comp, queue = [start], deque([start])
        while queue:
            cx, cy = queue.popleft()
            for dx, dy in _NEIGHBOURS:
                nb = GridCell(cx + dx, cy + dy)
                if nb in todo:
                    todo.discard(nb)
                    comp.append(nb)
                    queue.append(nb)
        comp.sort()
        centers = [cell_center(c, cfg) for c in comp]
        centroid = PlanePoint(
            math.fsum(p.x for p in centers) / len(centers), math.fsum(p.y for p in centers) / len(centers)
        )
        clusters.append(Cluster(tuple(comp), centroid, unproject(centroid, cfg.origin)))
    return clusters


@dataclass
class Counts:
    tagged_total: int = 0
    confirmed_permitted: int = 0
    unpermitted_clusters: int = 0
    out_of_scope_permits: int = 0
    missed_permits: int = 0


@dataclass
class EvaluationReport:
    tagged_total: int
    confirmed_permitted: int
    unpermitted_clusters: int
    out_of_scope_permits: int
    missed_permits: int
    total_permits: int
    in_scope_permits: int
    confirmed_out_of_scope: int = 0
    per_borough: dict[str, Counts] = field(default_factory=dict)
    clusters: list[Cluster] = field(default_factory=list)
    confirmed_permit_ids: list[str] = field(default_factory=list)
    cluster_boroughs: list[str] = field(default_factory=list)

    def check(self) -> None:
        """Raise :class:`InvariantViolation` unless every count identity holds."""
        rows = [("total", self)] + list(self.per_borough.items())
        for name, c in rows:
            if c.tagged_total != c.confirmed_permitted + c.unpermitted_clusters:
                raise InvariantViolation(f"{name}: tagged_total != confirmed_permitted + unpermitted_clusters")
        if self.in_scope_permits != self.total_permits - self.out_of_scope_permits:
            raise InvariantViolation("in-scope permits != total - out_of_scope")
        if self.missed_permits != self.in_scope_permits - self.confirmed_permitted:
            raise InvariantViolation("missed_permits != in-scope - confirmed_permitted")
        if self.missed_permits < 0:
            raise InvariantViolation("negative missed_permits")
        if self.unpermitted_clusters != len(self.clusters):
            raise InvariantViolation("cluster count mismatch")
        summed = Counts()
        for c in self.per_borough.values():
            for k in asdict(summed):
                setattr(summed, k, getattr(summed, k) + getattr(c, k))
        for k, v in asdict(summed).items():
            if v != getattr(self, k):
                raise InvariantViolation(f"per-borough {k} does not add up to the total")

    def to_json(self) -> dict:
        return {
            "tagged_total": self.tagged_total,
            "confirmed_permitted": self.confirmed_permitted,
            "unpermitted_clusters": self.unpermitted_clusters,
            "out_of_scope_permits": self.out_of_scope_permits,
            "missed_permits": self.missed_permits,
            "total_permits": self.total_permits,
            "in_scope_permits": self.in_scope_permits,
            "confirmed_out_of_scope": self.confirmed_out_of_scope,
            "per_borough": {k: asdict(v) for k, v in sorted(self.per_borough.items())},
            "confirmed_permit_ids": list(self.confirmed_permit_ids),
        }

    def summary_text(self) -> str:
        def pct(a, b):
            return f"{100.0 * a / b:.1f}%" if b else "n/a"

        lines = [
            f"known permits:          {self.total_permits}",
            f"out of coverage:        {self.out_of_scope_permits} ({pct(self.out_of_scope_permits, self.total_permits)})",
            f"tagged structures:      {self.tagged_total}",
            f"  matched to a permit:  {self.confirmed_permitted}",
            f"  unpermitted:          {self.unpermitted_clusters} ({pct(self.unpermitted_clusters, self.tagged_total)})",
            f"missed (in coverage):   {self.missed_permits} ({pct(self.missed_permits, self.total_permits)})",
        ]
        for name, c in sorted(self.per_borough.items()):
            lines.append(
                f"  {name:<14} permits out of coverage {c.out_of_scope_permits}, confirmed {c.confirmed_permitted},"
                f" unpermitted {c.unpermitted_clusters}, missed {c.missed_permits}"
            )
        return "\n".join(lines)


def build_report(
    verdicts: Iterable[CellVerdict],
    permits: Iterable[PermitRecord],
    frames: Iterable[FrameRecord],
    cfg: GridConfig = GridConfig(),
    *,
    boroughs: Optional[AreaIndex] = None,
    rule: str = "last",
    min_frames: int = MIN_COVERAGE_FRAMES,
) -> EvaluationReport:
    permits = list(permits)
    coverage = coverage_ceiling(frames, permits, cfg, min_frames)
    out_ids = {p.permit_id for p in coverage.out_of_scope}
    confirmed_ids, unmatched = match_confirmations(verdicts, permits, cfg, rule)
    clusters = cluster_unpermitted(unmatched, cfg)

    per: dict[str, Counts] = {}

    def bucket(name: str) -> Counts:
        return per.setdefault(name, Counts())

    for b in BOROUGH_ORDER:
        if any(p.borough is b for p in permits):
            bucket(b.value)
    confirmed_in_scope = []
    for p in permits:
        c = bucket(p.borough.value)
        if p.permit_id in out_ids:
            c.out_of_scope_permits += 1
        elif p.permit_id in confirmed_ids:
            c.confirmed_permitted += 1
            c.tagged_total += 1
            confirmed_in_scope.append(p.permit_id)
        else:
            c.missed_permits += 1
    cluster_boroughs = []
    for cl in clusters:
        name = (boroughs.nearest(cl.location.lon, cl.location.lat) if boroughs else None) or UNASSIGNED
        cluster_boroughs.append(name)
        c = bucket(name)
        c.unpermitted_clusters += 1
        c.tagged_total += 1

    n_conf = len(confirmed_in_scope)
    report = EvaluationReport(
        tagged_total=n_conf + len(clusters),
        confirmed_permitted=n_conf,
        unpermitted_clusters=len(clusters),
        out_of_scope_permits=len(out_ids),
        missed_permits=len(permits) - len(out_ids) - n_conf,
        total_permits=len(permits),
        in_scope_permits=len(permits) - len(out_ids),
        confirmed_out_of_scope=len(confirmed_ids & out_ids),
        per_borough=per,
        clusters=clusters,
        confirmed_permit_ids=sorted(confirmed_in_scope),
        cluster_boroughs=cluster_boroughs,
    )
    report.check()
    return report


@dataclass(frozen=True)
class ImpactFactor:
    area_id: str
    summed_age_days: int
    permit_count: int = 0


def impact_factor(permits: Iterable[PermitRecord], areas: list[Area], as_of: date) -> list[ImpactFactor]:
    """Summed age in days of active permits per area, as of ``as_of``."""
    index = AreaIndex(areas)
    days = {a: 0 for a in index.ids}
    count = {a: 0 for a in index.ids}
    for p in filter_active(permits, as_of):
        area = index.locate(p.location.lon, p.location.lat) or UNASSIGNED
        days.setdefault(area, 0)
        count.setdefault(area, 0)
        days[area] += max(0, (as_of - p.issued_on).days)
        count[area] += 1
    return [ImpactFactor(a, days[a], count[a]) for a in sorted(days)]
