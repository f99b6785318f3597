"""CSV / JSON / GeoJSON writers for pipeline outputs.

All writers are deterministic: keys sorted, fixed float formatting by
``repr``, ``\\n`` line endings.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Optional

from shapely.geometry import mapping

from .areas import Area, UNASSIGNED
from .geo import GridConfig, cell_polygon
from .ingest import format_timestamp
from .tagging import CellVerdict


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, header, rows: Iterable) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _ts(t):
    return format_timestamp(t) if t is not None else None


VERDICT_COLUMNS = (
    "ix", "iy", "confirmed", "last_window_confirmed", "first_confirmed_at", "first_observed_at",
    "observation_count", "positive_count", "insufficient_coverage",
)


def verdict_rows(verdicts: Iterable[CellVerdict]):
    for v in verdicts:
        yield (
            v.cell.ix, v.cell.iy, v.confirmed, v.last_window_confirmed, _ts(v.first_confirmed_at) or "",
            _ts(v.first_observed_at) or "", v.observation_count, v.positive_count, v.insufficient_coverage,
        )


def verdicts_geojson(verdicts: Iterable[CellVerdict], cfg: GridConfig, confirmed_only: bool = False) -> dict:
    features = []
    for v in verdicts:
        if confirmed_only and not v.confirmed:
            continue
        features.append({
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [cell_polygon(v.cell, cfg)]},
            "properties": {
                "ix": v.cell.ix,
                "iy": v.cell.iy,
                "confirmed": v.confirmed,
                "last_window_confirmed": v.last_window_confirmed,
                "first_confirmed_at": _ts(v.first_confirmed_at),
                "observation_count": v.observation_count,
                "positive_count": v.positive_count,
                "insufficient_coverage": v.insufficient_coverage,
            },
        })
    return {"type": "FeatureCollection", "features": features}


def clusters_geojson(clusters, cfg: GridConfig, boroughs: Optional[list] = None) -> dict:
    features = []
    for i, cl in enumerate(clusters):
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [cl.location.lon, cl.location.lat]},
            "properties": {
                "cluster": i,
                "cell_count": len(cl.cells),
                "cells": [[c.ix, c.iy] for c in cl.cells],
                "borough": boroughs[i] if boroughs else UNASSIGNED,
            },
        })
    return {"type": "FeatureCollection", "features": features}


def impact_geojson(factors, areas: list[Area]) -> dict:
    geoms = {a.area_id: a.geometry for a in areas}
    features = []
    for f in factors:
        geom = geoms.get(f.area_id)
        features.append({
            "type": "Feature",
            "geometry": mapping(geom) if geom is not None else None,
            "properties": {"area_id": f.area_id, "summed_age_days": f.summed_age_days, "permit_count": f.permit_count},
        })
    # shapely emits nested tuples; round-trip so the structure is plain lists
    return {"type": "FeatureCollection", "features": json.loads(json.dumps(features))}


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
