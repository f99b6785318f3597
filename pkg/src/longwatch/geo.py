"""Planar geometry: local projection, bearings, heading displacement and the cell grid.

All spatial reasoning happens on a single equirectangular tangent plane
centred on a configurable origin, in feet.  Headings are compass degrees,
clockwise from true north, in ``[0, 360)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import BoundsError, ConfigError, DegenerateBearingError

EARTH_RADIUS_M = 6_371_008.8
FEET_PER_METER = 3.280839895
EARTH_RADIUS_FT = EARTH_RADIUS_M * FEET_PER_METER
PLANE_LIMIT_FT = 1_000_000.0
COINCIDENT_FT = 0.01


@dataclass(frozen=True)
class BoundingBox:
    south: float
    west: float
    north: float
    east: float

    def contains(self, lat, lon) -> bool:
        return self.south <= lat <= self.north and self.west <= lon <= self.east

    def check(self, lat, lon, what="point"):
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise BoundsError(f"{what} has non-finite coordinate ({lat}, {lon})")
        if not self.south <= lat <= self.north:
            raise BoundsError(f"{what} latitude {lat} outside [{self.south}, {self.north}]")
        if not self.west <= lon <= self.east:
            raise BoundsError(f"{what} longitude {lon} outside [{self.west}, {self.east}]")


NYC_BOUNDS = BoundingBox(south=40.45, west=-74.30, north=40.95, east=-73.65)


@dataclass(frozen=True, slots=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise BoundsError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise BoundsError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise BoundsError(f"longitude {self.lon} outside [-180, 180]")


CITY_HALL = GeoPoint(40.7128, -74.0060)


@dataclass(frozen=True, slots=True)
class PlanePoint:
    """Feet east (``x``) and north (``y``) of the projection origin."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise BoundsError(f"non-finite planar point ({self.x}, {self.y})")
        if abs(self.x) >= PLANE_LIMIT_FT or abs(self.y) >= PLANE_LIMIT_FT:
            raise BoundsError(f"planar point ({self.x}, {self.y}) beyond {PLANE_LIMIT_FT:.0f} ft")

    def distance_to(self, other: PlanePoint) -> float:
        return math.hypot(other.x - self.x, other.y - self.y)


class GridCell(NamedTuple):
    ix: int
    iy: int


@dataclass(frozen=True)
class GridConfig:
    origin: GeoPoint = CITY_HALL
    cell_size_ft: float = 80.0
    displacement_ft: float = 60.0
    region_size_ft: float = 320.0
    visibility_radius_ft: float = 120.0
    bounds: BoundingBox = field(default=NYC_BOUNDS)

    def __post_init__(self):
        for name in ("cell_size_ft", "displacement_ft", "region_size_ft", "visibility_radius_ft"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be strictly positive, got {value}")
        ratio = self.region_size_ft / self.cell_size_ft
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("region_size_ft must be an integer multiple of cell_size_ft")
        self.bounds.check(self.origin.lat, self.origin.lon, "grid origin")


def normalize_heading(degrees: float) -> float:
    h = math.fmod(degrees, 360.0)
    if h < 0:
        h += 360.0
    # fmod of tiny negatives can round up to exactly 360
    return 0.0 if h >= 360.0 else h


def project(p: GeoPoint, origin: GeoPoint = CITY_HALL, bounds: BoundingBox = NYC_BOUNDS) -> PlanePoint:
    bounds.check(p.lat, p.lon)
    bounds.check(origin.lat, origin.lon, "origin")
    x = EARTH_RADIUS_FT * math.cos(math.radians(origin.lat)) * math.radians(p.lon - origin.lon)
    y = EARTH_RADIUS_FT * math.radians(p.lat - origin.lat)
    return PlanePoint(x, y)


def unproject(p: PlanePoint, origin: GeoPoint = CITY_HALL) -> GeoPoint:
    lat = origin.lat + math.degrees(p.y / EARTH_RADIUS_FT)
    lon = origin.lon + math.degrees(p.x / (EARTH_RADIUS_FT * math.cos(math.radians(origin.lat))))
    return GeoPoint(lat, lon)


def project_arrays(lat, lon, origin: GeoPoint = CITY_HALL, bounds: BoundingBox = NYC_BOUNDS):
    """Vectorised :func:`project`; returns ``(x, y)`` arrays in feet."""
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    bad = ~((lat >= bounds.south) & (lat <= bounds.north) & (lon >= bounds.west) & (lon <= bounds.east))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        bounds.check(float(lat[i]), float(lon[i]), f"point #{i}")
    x = EARTH_RADIUS_FT * math.cos(math.radians(origin.lat)) * np.radians(lon - origin.lon)
    y = EARTH_RADIUS_FT * np.radians(lat - origin.lat)
    return x, y


def unproject_arrays(x, y, origin: GeoPoint = CITY_HALL):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lat = origin.lat + np.degrees(y / EARTH_RADIUS_FT)
    lon = origin.lon + np.degrees(x / (EARTH_RADIUS_FT * math.cos(math.radians(origin.lat))))
    return lat, lon


def planar_bearing(a: PlanePoint, b: PlanePoint) -> float:
    dx, dy = b.x - a.x, b.y - a.y
    if math.hypot(dx, dy) <= COINCIDENT_FT:
        raise DegenerateBearingError(f"bearing undefined between coincident points {a} and {b}")
    return normalize_heading(math.degrees(math.atan2(dx, dy)))


def bearing_to(a: GeoPoint, b: GeoPoint, origin: GeoPoint = CITY_HALL, bounds: BoundingBox = NYC_BOUNDS) -> float:
    """Compass bearing from ``a`` to ``b`` measured on the projection plane."""
    return planar_bearing(project(a, origin, bounds), project(b, origin, bounds))


def angular_diff(a: float, b: float) -> float:
    """Smallest absolute difference between two headings, in ``[0, 180]``."""
    d = abs(normalize_heading(a) - normalize_heading(b))
    return 360.0 - d if d > 180.0 else d


def displace_along_heading(p: PlanePoint, heading: float, distance_ft: float) -> PlanePoint:
    if distance_ft < 0:
        raise ValueError(f"displacement must be non-negative, got {distance_ft}")
    h = math.radians(heading)
    return PlanePoint(p.x + distance_ft * math.sin(h), p.y + distance_ft * math.cos(h))


def cell_of(p: PlanePoint, cfg: GridConfig) -> GridCell:
    s = cfg.cell_size_ft
    return GridCell(math.floor(p.x / s), math.floor(p.y / s))


def cells_of_arrays(x, y, cell_size_ft: float):
    ix = np.floor(np.asarray(x) / cell_size_ft).astype(np.int64)
    iy = np.floor(np.asarray(y) / cell_size_ft).astype(np.int64)
    return ix, iy


def cell_bounds(cell: GridCell, cfg: GridConfig):
    s = cfg.cell_size_ft
    return cell.ix * s, cell.iy * s, (cell.ix + 1) * s, (cell.iy + 1) * s


def cell_center(cell: GridCell, cfg: GridConfig) -> PlanePoint:
    s = cfg.cell_size_ft
    return PlanePoint((cell.ix + 0.5) * s, (cell.iy + 0.5) * s)


def _span(lo: float, hi: float, s: float) -> range:
    # cells whose half-open interval overlaps [lo, hi] with positive length
    return range(math.floor(lo / s), math.ceil(hi / s))


def cells_in_region(center: PlanePoint, cfg: GridConfig) -> set[GridCell]:
    """Cells overlapping the square of side ``region_size_ft`` centred on ``center``."""
    h = cfg.region_size_ft / 2.0
    s = cfg.cell_size_ft
    xs = _span(center.x - h, center.x + h, s)
    ys = _span(center.y - h, center.y + h, s)
    return {GridCell(ix, iy) for ix in xs for iy in ys}


def cell_polygon(cell: GridCell, cfg: GridConfig) -> list[list[float]]:
    """Closed lon/lat ring of a cell, counter-clockwise, for GeoJSON export."""
    x0, y0, x1, y1 = cell_bounds(cell, cfg)
    ring = []
    for x, y in ((x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)):
        g = unproject(PlanePoint(x, y), cfg.origin)
        ring.append([g.lon, g.lat])
    return ring
