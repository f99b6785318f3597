"""Synthetic worlds and Monte Carlo oracles for validating the pipeline.

Everything here is driven by ``numpy.random.Generator`` (PCG64) seeded
explicitly, so identical arguments always give identical output.
"""

from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from typing import Optional

import numpy as np

from .amplify import binomial_upper_tail
from .errors import ConfigError
from .evaluate import EvaluationReport, build_report
from .geo import GridConfig, PlanePoint, cells_in_region, cell_of, normalize_heading, unproject
from .ingest import (
    BOROUGH_ORDER,
    Borough,
    FrameRecord,
    PermitRecord,
    filter_active,
    parse_frames,
    parse_permits,
    write_frames_jsonl,
    write_permits_csv,
)
from .tagging import TaggingParams, run_tagging

HEADING_JITTER_DEG = 15.0
DEFAULT_START = datetime(2023, 8, 11, tzinfo=timezone.utc)
DEFAULT_DURATION = timedelta(days=152)
MC_BLOCK = 1 << 16


@dataclass(frozen=True)
class PlaneRect:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    @classmethod
    def square(cls, side: float) -> PlaneRect:
        h = side / 2.0
        return cls(-h, -h, h, h)

    def contains(self, p: PlanePoint) -> bool:
        return self.xmin <= p.x <= self.xmax and self.ymin <= p.y <= self.ymax


@dataclass(frozen=True)
class Shed:
    location: PlanePoint
    permitted: bool
    permit_id: Optional[str]
    borough: Borough


@dataclass(frozen=True)
class SyntheticWorld:
    bounds: PlaneRect
    sheds: tuple[Shed, ...]
    seed: int
    cfg: GridConfig = GridConfig()
    permits: tuple[PermitRecord, ...] = ()

    def permit_csv(self) -> str:
        buf = io.StringIO()
        write_permits_csv(self.permits, buf)
        return buf.getvalue()


@dataclass(frozen=True)
class DetectorModel:
    recall: float = 0.5676
    false_positive_rate: float = 0.0
    visibility_ft: float = 120.0

    def __post_init__(self):
        for name in ("recall", "false_positive_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not self.visibility_ft > 0:
            raise ConfigError("visibility_ft must be positive")


def default_bounds(n_sheds: int, cfg: GridConfig = GridConfig()) -> PlaneRect:
    spacing = 2.2 * cfg.region_size_ft * 2.0
    return PlaneRect.square(max(1.0, math.ceil(math.sqrt(max(n_sheds, 1)))) * spacing)


def gen_world(
    n_permitted: int,
    n_unpermitted: int,
    bounds: Optional[PlaneRect] = None,
    seed: int = 0,
    cfg: GridConfig = GridConfig(),
    *,
    as_of: date = date(2024, 1, 10),
) -> SyntheticWorld:
    """Scatter sheds at cell centres with pairwise spacing above twice the region size.

    Permitted sheds get permit records active on ``as_of``; unpermitted ones
    get none.
    """
    if n_permitted < 0 or n_unpermitted < 0:
        raise ValueError("shed counts must be non-negative")
    n = n_permitted + n_unpermitted
    bounds = bounds or default_bounds(n, cfg)
    rng = np.random.default_rng(seed)
    min_sep = 2.0 * cfg.region_size_ft
    placed: list[PlanePoint] = []
    grid: dict[tuple[int, int], list[PlanePoint]] = {}
    attempts, budget = 0, 1000 + 500 * n
    while len(placed) < n:
        attempts += 1
        if attempts > budget:
            raise ValueError(
                f"could not place {n} sheds {min_sep:.0f} ft apart inside {bounds}; enlarge the bounds"
            )
        raw = PlanePoint(rng.uniform(bounds.xmin, bounds.xmax), rng.uniform(bounds.ymin, bounds.ymax))
        c = cell_of(raw, cfg)
        p = PlanePoint((c.ix + 0.5) * cfg.cell_size_ft, (c.iy + 0.5) * cfg.cell_size_ft)
        if not bounds.contains(p):
            continue
        key = (math.floor(p.x / min_sep), math.floor(p.y / min_sep))
        near = (q for dx in (-1, 0, 1) for dy in (-1, 0, 1) for q in grid.get((key[0] + dx, key[1] + dy), ()))
        if any(p.distance_to(q) <= min_sep for q in near):
            continue
        placed.append(p)
        grid.setdefault(key, []).append(p)

    kinds = [True] * n_permitted + [False] * n_unpermitted
    sheds, permits = [], []
    for k, (p, permitted) in enumerate(zip(placed, kinds)):
        borough = BOROUGH_ORDER[int(rng.integers(len(BOROUGH_ORDER)))]
        age = int(rng.integers(0, 2000))
        life = int(rng.integers(30, 400))
        if permitted:
            pid = f"SIM{seed:04d}{k:06d}"
            permits.append(PermitRecord(
                pid, unproject(p, cfg.origin), as_of - timedelta(days=age), as_of + timedelta(days=life),
                borough, bool(rng.integers(2)),
            ))
        else:
            pid = None
        sheds.append(Shed(p, permitted, pid, borough))
    return SyntheticWorld(bounds, tuple(sheds), seed, cfg, tuple(permits))


def _heading_between(a: PlanePoint, b: PlanePoint) -> float:
    return normalize_heading(math.degrees(math.atan2(b.x - a.x, b.y - a.y)))


def gen_frames(
    world: SyntheticWorld,
    passes_per_shed: int,
    detector: DetectorModel = DetectorModel(),
    seed: int = 0,
    *,
    n_background: int = 0,
    start: datetime = DEFAULT_START,
    duration: timedelta = DEFAULT_DURATION,
    placement: str = "cell",
) -> list[FrameRecord]:
    """Simulate camera passes around every shed plus background traffic.

    ``placement="cell"`` puts the camera so its displaced observation point
    falls inside the shed's own cell (every pass lands in one history).
    ``placement="disk"`` draws camera positions uniformly within
    ``visibility_ft`` of the shed.  In both modes the camera faces the shed
    to within 15 degrees.
    """
    if passes_per_shed < 0 or n_background < 0:
        raise ValueError("frame counts must be non-negative")
    if placement not in ("cell", "disk"):
        raise ValueError(f"unknown placement {placement!r}")
    cfg = world.cfg
    d = cfg.displacement_ft
    jitter = min(d * math.sin(math.radians(HEADING_JITTER_DEG)) * 0.95, 0.45 * cfg.cell_size_ft)
    if placement == "cell" and d + jitter > detector.visibility_ft:
        raise ConfigError("displacement plus jitter exceeds detector visibility")
    rng = np.random.default_rng(seed)
    span_ms = int(duration.total_seconds() * 1000)
    frames: list[FrameRecord] = []

    def emit(fid: str, pos: PlanePoint, heading: float, hit: bool):
        t = start + timedelta(milliseconds=int(rng.integers(0, span_ms + 1)))
        conf = round(float(rng.uniform(0.85, 1.0)), 4) if hit else None
        frames.append(FrameRecord(fid, t, unproject(pos, cfg.origin), normalize_heading(heading), hit, conf))

    for s_idx, shed in enumerate(world.sheds):
        for k in range(passes_per_shed):
            if placement == "cell":
                rho = jitter * math.sqrt(rng.random())
                phi = rng.uniform(0.0, 2.0 * math.pi)
                target = PlanePoint(shed.location.x + rho * math.cos(phi), shed.location.y + rho * math.sin(phi))
                heading = rng.uniform(0.0, 360.0)
                h = math.radians(heading)
                pos = PlanePoint(target.x - d * math.sin(h), target.y - d * math.cos(h))
            else:
                rho = detector.visibility_ft * math.sqrt(rng.random())
                phi = rng.uniform(0.0, 2.0 * math.pi)
                pos = PlanePoint(shed.location.x + rho * math.cos(phi), shed.location.y + rho * math.sin(phi))
                base = _heading_between(pos, shed.location) if rho > 0.01 else rng.uniform(0.0, 360.0)
                heading = base + rng.uniform(-HEADING_JITTER_DEG, HEADING_JITTER_DEG)
            emit(f"s{s_idx:06d}-{k:05d}", pos, heading, bool(rng.random() < detector.recall))

    keep_out = cfg.region_size_ft + cfg.displacement_ft + max(cfg.visibility_radius_ft, detector.visibility_ft)
    b = world.bounds
    made, tries = 0, 0
    while made < n_background:
        tries += 1
        if tries > 1000 + 100 * n_background:
            raise ValueError("no room for background frames away from the sheds")
        pos = PlanePoint(rng.uniform(b.xmin, b.xmax), rng.uniform(b.ymin, b.ymax))
        if any(pos.distance_to(s.location) <= keep_out for s in world.sheds):
            continue
        emit(f"bg{made:07d}", pos, rng.uniform(0.0, 360.0), bool(rng.random() < detector.false_positive_rate))
        made += 1
    frames.sort(key=FrameRecord.sort_key)
    return frames


def frames_jsonl(frames) -> str:
    buf = io.StringIO()
    write_frames_jsonl(frames, buf)
    return buf.getvalue()


def _mc_block(rate, window, threshold, draws, seed, block):
    n = min(MC_BLOCK, draws - block * MC_BLOCK)
    rng = np.random.default_rng(np.random.SeedSequence([seed, block]))
    hits = (rng.random((n, window)) < rate).sum(axis=1)
    return int(np.count_nonzero(hits >= threshold))


def monte_carlo_tail(
    success_rate: float, window: int, threshold: int, draws: int, seed: int = 0, workers: int = 1
) -> float:
    """Empirical P[at least ``threshold`` successes in ``window`` Bernoulli trials].

    Draws are generated in fixed-size blocks with per-block seeds, so the
    result does not depend on ``workers``.
    """
    if draws < 1:
        raise ValueError("draws must be at least 1")
    if not 0.0 <= success_rate <= 1.0:
        raise ValueError("success_rate must lie in [0, 1]")
    blocks = range(-(-draws // MC_BLOCK))
    args = (success_rate, window, threshold, draws, seed)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hits = sum(pool.map(lambda b: _mc_block(*args, b), blocks))
    else:
        hits = sum(_mc_block(*args, b) for b in blocks)
    return hits / draws


@dataclass
class EndToEndReport:
    n_sheds: int
    n_unpermitted: int
    recall: float
    window: int
    threshold: int
    passes_per_shed: int
    confirmed_sheds: int
    recovered_unpermitted: int
    empirical: float
    analytic: float
    sigma: float
    sigmas_allowed: float
    evaluation: EvaluationReport
    failures: list[str] = field(default_factory=list)

    @property
    def delta(self) -> float:
        return self.empirical - self.analytic

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_json(self) -> dict:
        return {
            "verdict": "PASS" if self.passed else "FAIL",
            "n_sheds": self.n_sheds,
            "n_unpermitted": self.n_unpermitted,
            "recall": self.recall,
            "window": self.window,
            "threshold": self.threshold,
            "passes_per_shed": self.passes_per_shed,
            "confirmed_sheds": self.confirmed_sheds,
            "recovered_unpermitted": self.recovered_unpermitted,
            "empirical_recall": self.empirical,
            "analytic_recall": self.analytic,
            "delta": self.delta,
            "sigma": self.sigma,
            "sigmas_allowed": self.sigmas_allowed,
            "failures": list(self.failures),
            "evaluation": self.evaluation.to_json(),
        }


def end_to_end_check(
    n_permitted: int = 500,
    n_unpermitted: int = 0,
    passes_per_shed: int = 20,
    detector: DetectorModel = DetectorModel(),
    params: TaggingParams = TaggingParams(),
    seed: int = 0,
    cfg: GridConfig = GridConfig(),
    *,
    n_background: int = 0,
    sigmas: float = 4.0,
    as_of: date = date(2024, 1, 10),
) -> EndToEndReport:
    """Run world -> frames -> ingest -> tagging -> evaluation and compare with the binomial model.

    The confirmed fraction of sheds (final-window rule) should match
    ``P[Bin(window, recall) >= threshold]`` within ``sigmas`` standard errors.
    """
    world = gen_world(n_permitted, n_unpermitted, seed=seed, cfg=cfg, as_of=as_of)
    frames = gen_frames(world, passes_per_shed, detector, seed=seed + 1, n_background=n_background)

    # round-trip through the on-disk formats so ingest is exercised
    dataset = parse_frames(io.BytesIO(frames_jsonl(frames).encode()), "jsonl", bounds=cfg.bounds, max_reject_rate=0.0)
    permit_set = parse_permits(io.BytesIO(world.permit_csv().encode()), bounds=cfg.bounds)
    failures = []
    if dataset.rejected or permit_set.rejected or len(dataset) != len(frames):
        failures.append("generated files did not round-trip through ingest cleanly")
    permits = filter_active(permit_set.records, as_of)

    verdicts = run_tagging(dataset.frames, cfg, params)
    report = build_report(verdicts, permits, dataset.frames, cfg, rule="last", min_frames=params.window)

    confirmed_permits = set(report.confirmed_permit_ids)
    cluster_cells = [set(c.cells) for c in report.clusters]
    recovered = 0
    explained = [False] * len(cluster_cells)
    for shed in world.sheds:
        if shed.permitted:
            continue
        region = cells_in_region(shed.location, cfg)
        hit = False
        for i, cells in enumerate(cluster_cells):
            if cells & region:
                explained[i] = True
                hit = True
        recovered += hit
    n = len(world.sheds)
    confirmed = sum(1 for s in world.sheds if s.permitted and s.permit_id in confirmed_permits) + recovered

    # the final window holds `window` independent passes once coverage suffices
    if passes_per_shed >= params.window:
        analytic = binomial_upper_tail(params.window, params.threshold, detector.recall)
    else:
        analytic = 0.0
    empirical = confirmed / n if n else analytic
    sigma = math.sqrt(analytic * (1.0 - analytic) / n) if n else 0.0
    if abs(empirical - analytic) > sigmas * sigma + 1e-12:
        failures.append(
            f"confirmed fraction {empirical:.4f} differs from model {analytic:.4f} by more than {sigmas:g} sigma"
        )
    if detector.false_positive_rate == 0.0 and not all(explained):
        failures.append(f"{explained.count(False)} unpermitted clusters do not correspond to a planted shed")
    if detector.recall == 1.0 and passes_per_shed >= params.window and recovered != n_unpermitted:
        failures.append(f"recovered {recovered} of {n_unpermitted} planted unpermitted sheds")
    if detector.false_positive_rate == 0.0 and report.unpermitted_clusters != recovered:
        failures.append(f"{report.unpermitted_clusters} unpermitted clusters for {recovered} recovered sheds")

    return EndToEndReport(
        n, n_unpermitted, detector.recall, params.window, params.threshold, passes_per_shed,
        confirmed, recovered, empirical, analytic, sigma, sigmas, report, failures,
    )
