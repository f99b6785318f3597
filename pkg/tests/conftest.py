import io
import json
import math
from datetime import date, datetime, timedelta, timezone

import pytest

from longwatch.geo import GridConfig, PlanePoint, unproject
from longwatch.geo import GridCell
from longwatch.ingest import Borough, FrameRecord, PermitRecord
from longwatch.tagging import CellHistory, Observation

T0 = datetime(2023, 11, 1, tzinfo=timezone.utc)
CFG = GridConfig()


def haversine_ft(lat1, lon1, lat2, lon2, radius_m=6_371_008.8):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * radius_m * math.asin(math.sqrt(a)) * 3.280839895


def frame_at(fid, x, y, heading=0.0, detected=False, minutes=0, cfg=CFG, confidence=0.95):
    """Frame whose camera sits at planar (x, y) feet."""
    loc = unproject(PlanePoint(x, y), cfg.origin)
    return FrameRecord(fid, T0 + timedelta(minutes=minutes), loc, heading, detected, confidence if detected else None)


def permit_at(pid, x, y, borough=Borough.MANHATTAN, issued=date(2023, 1, 1), expires=date(2024, 6, 1), cfg=CFG):
    return PermitRecord(pid, unproject(PlanePoint(x, y), cfg.origin), issued, expires, borough, False)


def history(flags, cell=GridCell(0, 0)):
    """Cell history with one observation per minute from T0."""
    return CellHistory(cell, tuple(
        Observation(T0 + timedelta(minutes=i), bool(b), f"o{i:05d}") for i, b in enumerate(flags)
    ))


def jsonl_bytes(rows):
    return io.BytesIO("".join(json.dumps(r) + "\n" for r in rows).encode())


def frame_row(fid, minute=0, lat=40.7128, lon=-74.0060, heading=0.0, detected=False, confidence=None):
    row = {
        "frame_id": fid,
        "captured_at": (T0 + timedelta(minutes=minute)).strftime("%Y-%m-%dT%H:%M:%S.000Z"),
        "lat": lat,
        "lon": lon,
        "heading_deg": heading,
        "detected": detected,
    }
    if confidence is not None:
        row["confidence"] = confidence
    return row


PERMIT_HEADER = "Job Number,Latitude Point,Longitude Point,First Permit Date,Expiration Date,Borough Name,Permit Renewed\n"


@pytest.fixture
def cfg():
    return CFG
