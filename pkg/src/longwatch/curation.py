"""Selecting frames near active permits for annotation, borough-stratified."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .areas import AreaIndex
from .errors import ConfigError, DivergenceUndefined
from .geo import (
    COINCIDENT_FT,
    FEET_PER_METER,
    GridConfig,
    PlanePoint,
    angular_diff,
    planar_bearing,
    project,
    project_arrays,
)
from .ingest import BOROUGH_ORDER, Borough, FrameRecord, PermitRecord


@dataclass(frozen=True)
class CurationConfig:
    max_distance_m: float = 100.0
    angle_tolerance_deg: float = 45.0
    per_borough_quota: Mapping[Borough, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.max_distance_m > 0:
            raise ConfigError("max_distance_m must be positive")
        if not 0 < self.angle_tolerance_deg <= 180:
            raise ConfigError("angle_tolerance_deg must lie in (0, 180]")


@dataclass(frozen=True)
class BoroughDistribution:
    weights: Mapping[Borough, float]

    def __post_init__(self):
        if any(not math.isfinite(w) or w < 0 for w in self.weights.values()):
            raise ValueError("borough weights must be finite and non-negative")
        if not any(w > 0 for w in self.weights.values()):
            raise ValueError("borough distribution needs at least one positive weight")

    def normalized(self) -> dict[Borough, float]:
        total = math.fsum(self.weights.values())
        return {b: self.weights.get(b, 0.0) / total for b in BOROUGH_ORDER if b in self.weights}

    @classmethod
    def from_counts(cls, labels: Iterable[Borough]) -> BoroughDistribution:
        c = Counter(labels)
        return cls({b: float(c.get(b, 0)) for b in BOROUGH_ORDER})


# Shares reported for the January 2024 DOB active-shed registry and for the
# annotated training images (three decimals, so neither column sums to 1).
DOB_PERMIT_SHARE = BoroughDistribution({
    Borough.MANHATTAN: 0.529, Borough.BROOKLYN: 0.220, Borough.BRONX: 0.150,
    Borough.QUEENS: 0.088, Borough.STATEN_ISLAND: 0.005,
})
ANNOTATED_IMAGE_SHARE = BoroughDistribution({
    Borough.MANHATTAN: 0.538, Borough.BROOKLYN: 0.221, Borough.BRONX: 0.135,
    Borough.QUEENS: 0.098, Borough.STATEN_ISLAND: 0.011,
})


@dataclass(frozen=True)
class CurationMatch:
    frame: FrameRecord
    permit: PermitRecord
    distance_m: float
    bearing_gap_deg: float


def near_permit_filter(
    frames: Iterable[FrameRecord],
    permits: Iterable[PermitRecord],
    cfg: CurationConfig = CurationConfig(),
    grid: GridConfig = GridConfig(),
) -> list[CurationMatch]:
    """Pair each frame with the nearest permit it is close to and facing.

    A permit qualifies when it lies within ``max_distance_m`` of the camera
    and the bearing from camera to permit is within ``angle_tolerance_deg``
    of the camera heading.  A camera standing on the permit point always
    qualifies.
    """
    frames = list(frames)
    permits = list(permits)
    if not frames or not permits:
        return []
    radius_ft = cfg.max_distance_m * FEET_PER_METER
    ppts = [project(p.location, grid.origin, grid.bounds) for p in permits]
    buckets: dict[tuple[int, int], list[int]] = defaultdict(list)
    for j, pt in enumerate(ppts):
        buckets[(math.floor(pt.x / radius_ft), math.floor(pt.y / radius_ft))].append(j)

    fx, fy = project_arrays(
        [f.location.lat for f in frames], [f.location.lon for f in frames], grid.origin, grid.bounds
    )
    out = []
    for i, frame in enumerate(frames):
        here = PlanePoint(float(fx[i]), float(fy[i]))
        bx, by = math.floor(here.x / radius_ft), math.floor(here.y / radius_ft)
        best = None
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for j in buckets.get((bx + dx, by + dy), ()):
                    d_ft = here.distance_to(ppts[j])
                    d_m = d_ft / FEET_PER_METER
                    if d_m > cfg.max_distance_m:
                        continue
                    if d_ft < COINCIDENT_FT:
                        gap = 0.0
                    else:
                        gap = angular_diff(frame.heading, planar_bearing(here, ppts[j]))
                        if gap > cfg.angle_tolerance_deg:
                            continue
                    key = (d_m, permits[j].permit_id)
                    if best is None or key < best[0]:
                        best = (key, j, gap)
        if best is not None:
            (d_m, _), j, gap = best
            out.append(CurationMatch(frame, permits[j], d_m, gap))
    return out


def label_boroughs(frames: Iterable[FrameRecord], boroughs: AreaIndex) -> list[tuple[FrameRecord, Borough]]:
    """Attach a borough to each frame by point-in-polygon; frames outside every polygon are dropped."""
    labelled = []
    for f in frames:
        name = boroughs.locate(f.location.lon, f.location.lat)
        if name is not None:
            labelled.append((f, Borough.parse(name)))
    return labelled


def apportion(weights: Mapping, total: int) -> dict:
    """Largest-remainder apportionment of ``total`` seats over ``weights``.

    Ties in the remainder go to the key that comes first in ``weights``.
    """
    keys = list(weights)
    wsum = math.fsum(weights.values())
    if total == 0:
        return {k: 0 for k in keys}
    if wsum <= 0:
        raise ValueError("cannot apportion over all-zero weights")
    exact = {k: total * weights[k] / wsum for k in keys}
    seats = {k: math.floor(exact[k]) for k in keys}
    left = total - sum(seats.values())
    order = sorted(keys, key=lambda k: (-(exact[k] - seats[k]), keys.index(k)))
    for k in order[:left]:
        seats[k] += 1
    return seats


@dataclass
class StratifiedSample:
    frames: list[FrameRecord]
    counts: dict[Borough, int]
    shortfall: dict[Borough, int]


def stratified_sample(
    candidates: Iterable[tuple[FrameRecord, Borough]],
    target: BoroughDistribution,
    total: int,
    seed: int,
) -> StratifiedSample:
    pools: dict[Borough, list[FrameRecord]] = {b: [] for b in BOROUGH_ORDER}
    seen = set()
    for frame, borough in candidates:
        if frame.frame_id not in seen:
            seen.add(frame.frame_id)
            pools[borough].append(frame)
    for pool in pools.values():
        pool.sort(key=lambda f: f.frame_id)
    available = sum(len(p) for p in pools.values())
    if total < 0:
        raise ValueError("total must be non-negative")
    if total > available:
        raise ValueError(f"requested {total} frames but only {available} candidates (deficit {total - available})")

    weights = target.normalized()
    quota = apportion({b: weights.get(b, 0.0) for b in BOROUGH_ORDER}, total)
    shortfall: dict[Borough, int] = {}
    capped: set[Borough] = set()
    while True:
        over = {b: quota[b] - len(pools[b]) for b in BOROUGH_ORDER if quota[b] > len(pools[b])}
        if not over:
            break
        for b, deficit in over.items():
            quota[b] = len(pools[b])
            shortfall[b] = shortfall.get(b, 0) + deficit
            capped.add(b)
        open_ = [b for b in BOROUGH_ORDER if b not in capped and len(pools[b]) > quota[b]]
        share = {b: weights.get(b, 0.0) for b in open_}
        if not any(share.values()):
            share = {b: float(len(pools[b]) - quota[b]) for b in open_}
        for b, extra in apportion(share, sum(over.values())).items():
            quota[b] += extra

    rng = np.random.default_rng(seed)
    picked = []
    for b in BOROUGH_ORDER:
        if quota[b]:
            idx = rng.choice(len(pools[b]), size=quota[b], replace=False)
            picked.extend(pools[b][i] for i in sorted(idx))
    picked.sort(key=FrameRecord.sort_key)
    return StratifiedSample(picked, {b: quota[b] for b in BOROUGH_ORDER}, shortfall)


def kl_divergence(p: BoroughDistribution, q: BoroughDistribution) -> float:
    """KL(p || q) in nats over normalized weights."""
    pn, qn = p.normalized(), q.normalized()
    terms = []
    for b, pb in pn.items():
        if pb == 0:
            continue
        qb = qn.get(b, 0.0)
        if qb == 0:
            raise DivergenceUndefined(f"q has zero weight for {b} where p has {pb:.4g}")
        terms.append(pb * math.log(pb / qb))
    return max(0.0, math.fsum(terms))


def candidates_from_matches(matches: Iterable[CurationMatch]) -> list[tuple[FrameRecord, Borough]]:
    """Label each matched frame with its permit's borough."""
    return [(m.frame, m.permit.borough) for m in matches]


def quota_from_config(cfg: CurationConfig) -> Optional[BoroughDistribution]:
    if not cfg.per_borough_quota:
        return None
    return BoroughDistribution({b: float(cfg.per_borough_quota.get(b, 0)) for b in BOROUGH_ORDER})
