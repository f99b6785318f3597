"""Polygon layers (boroughs, neighbourhood tabulation areas) and point lookup."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import shapely
from shapely.geometry import Point, shape

from .errors import DataError

UNASSIGNED = "_unassigned"


@dataclass(frozen=True)
class Area:
    area_id: str
    geometry: object


def areas_from_geojson(obj: dict, id_property: str) -> list[Area]:
    if obj.get("type") != "FeatureCollection":
        raise DataError("area file must be a GeoJSON FeatureCollection")
    areas = []
    for i, feat in enumerate(obj.get("features", [])):
        props = feat.get("properties") or {}
        if id_property not in props:
            raise DataError(f"feature #{i} has no {id_property!r} property")
        geom = shape(feat["geometry"])
        if geom.geom_type not in ("Polygon", "MultiPolygon"):
            raise DataError(f"feature #{i} is a {geom.geom_type}, expected a polygon")
        areas.append(Area(str(props[id_property]), geom))
    return areas


def load_areas(path, id_property: str) -> list[Area]:
    with open(path, encoding="utf-8") as fh:
        return areas_from_geojson(json.load(fh), id_property)


class AreaIndex:
    """Point-in-polygon lookup over lon/lat polygons.

    Points on a shared boundary go to the lexicographically smallest id.
    """

    def __init__(self, areas: list[Area]):
        self.areas = sorted(areas, key=lambda a: a.area_id)
        self.ids = [a.area_id for a in self.areas]
        self._tree = shapely.STRtree([a.geometry for a in self.areas]) if self.areas else None

    def locate(self, lon: float, lat: float) -> Optional[str]:
        if self._tree is None:
            return None
        hits = self._tree.query(Point(lon, lat), predicate="covered_by")
        if len(hits) == 0:
            return None
        return self.ids[int(min(hits))]

    def nearest(self, lon: float, lat: float) -> Optional[str]:
        """Containing area if any, otherwise the closest one by planar lon/lat distance."""
        found = self.locate(lon, lat)
        if found is not None or self._tree is None:
            return found
        pt = Point(lon, lat)
        dists = [(a.geometry.distance(pt), a.area_id) for a in self.areas]
        return min(dists)[1]
