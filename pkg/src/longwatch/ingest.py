"""Loading and validating frame metadata and sidewalk-shed permit records.

Frames arrive as JSONL (one object per line) or CSV with the same column
names::

    frame_id, captured_at, lat, lon, heading_deg, detected, confidence

Permits arrive as CSV in the DOB "Active Sheds" layout; the header names are
mapped to record fields through a :class:`ColumnMap`.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import httpx

from .errors import BoundsError, ConfigError, DataError, FetchError, SchemaError
from .geo import NYC_BOUNDS, BoundingBox, GeoPoint, normalize_heading

log = logging.getLogger(__name__)

DEFAULT_CONFIDENCE_THRESHOLD = 0.85
DEFAULT_MAX_REJECT_RATE = 0.01
FRAME_FIELDS = ("frame_id", "captured_at", "lat", "lon", "heading_deg", "detected", "confidence")
REQUIRED_FRAME_FIELDS = FRAME_FIELDS[:-1]
APP_TOKEN_ENV = "LONGWATCH_APP_TOKEN"
APP_TOKEN_HEADER = "X-App-Token"


class Borough(str, Enum):
    MANHATTAN = "Manhattan"
    BROOKLYN = "Brooklyn"
    BRONX = "Bronx"
    QUEENS = "Queens"
    STATEN_ISLAND = "Staten Island"

    @classmethod
    def parse(cls, text) -> Borough:
        key = re.sub(r"[^A-Z0-9]", "", str(text).upper())
        try:
            return _BOROUGH_ALIASES[key]
        except KeyError:
            raise ValueError(f"unknown borough {text!r}") from None

    def __str__(self):
        return self.value


_BOROUGH_ALIASES = {
    "MANHATTAN": Borough.MANHATTAN, "NEWYORK": Borough.MANHATTAN, "MN": Borough.MANHATTAN, "1": Borough.MANHATTAN,
    "BRONX": Borough.BRONX, "THEBRONX": Borough.BRONX, "BX": Borough.BRONX, "2": Borough.BRONX,
    "BROOKLYN": Borough.BROOKLYN, "KINGS": Borough.BROOKLYN, "BK": Borough.BROOKLYN, "3": Borough.BROOKLYN,
    "QUEENS": Borough.QUEENS, "QN": Borough.QUEENS, "4": Borough.QUEENS,
    "STATENISLAND": Borough.STATEN_ISLAND, "RICHMOND": Borough.STATEN_ISLAND, "SI": Borough.STATEN_ISLAND,
    "5": Borough.STATEN_ISLAND,
}

BOROUGH_ORDER = tuple(Borough)


# --------------------------------------------------------------------------- frames


@dataclass(frozen=True, slots=True)
class FrameRecord:
    frame_id: str
    captured_at: datetime
    location: GeoPoint
    heading: float
    detected: bool
    confidence: Optional[float] = None

    def sort_key(self):
        return (self.captured_at, self.frame_id)

    def to_json(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "captured_at": format_timestamp(self.captured_at),
            "lat": self.location.lat,
            "lon": self.location.lon,
            "heading_deg": self.heading,
            "detected": self.detected,
            "confidence": self.confidence,
        }


@dataclass(frozen=True)
class StudyWindow:
    start: datetime
    end: datetime

    def contains(self, t: datetime) -> bool:
        return self.start <= t <= self.end


@dataclass
class DetectionDataset:
    frames: list[FrameRecord]
    source_digest: str
    rejected: int = 0
    rejects: list[tuple[str, int, str]] = field(default_factory=list)
    demoted: int = 0
    lines: int = 0

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    @property
    def time_range(self):
        if not self.frames:
            return None
        return self.frames[0].captured_at, self.frames[-1].captured_at


def parse_timestamp(text: str) -> datetime:
    s = str(text).strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    t = datetime.fromisoformat(s)
    if t.tzinfo is None:
        t = t.replace(tzinfo=timezone.utc)
    t = t.astimezone(timezone.utc)
    return t.replace(microsecond=(t.microsecond // 1000) * 1000)


def format_timestamp(t: datetime) -> str:
    t = t.astimezone(timezone.utc)
    return t.strftime("%Y-%m-%dT%H:%M:%S.") + f"{t.microsecond // 1000:03d}Z"


def parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, int) and value in (0, 1):
        return bool(value)
    s = str(value).strip().lower()
    if s in ("true", "t", "1", "yes", "y"):
        return True
    if s in ("false", "f", "0", "no", "n", ""):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _finite(value, name) -> float:
    if isinstance(value, bool):
        raise ValueError(f"{name} must be numeric")
    x = float(value)
    if not math.isfinite(x):
        raise ValueError(f"{name} is not finite")
    return x


def frame_from_mapping(
    row: dict,
    *,
    confidence_threshold: float = DEFAULT_CONFIDENCE_THRESHOLD,
    bounds: BoundingBox = NYC_BOUNDS,
    study_window: Optional[StudyWindow] = None,
) -> tuple[FrameRecord, bool]:
    """Build a validated record from one raw row.

    Returns the record and whether it was demoted below the confidence
    threshold.  Raises ``ValueError`` (or a subclass) for malformed rows.
    """
    missing = [k for k in REQUIRED_FRAME_FIELDS if row.get(k) in (None, "")]
    if missing:
        raise ValueError("missing " + ", ".join(missing))
    frame_id = str(row["frame_id"]).strip()
    if not frame_id:
        raise ValueError("empty frame_id")
    captured_at = parse_timestamp(row["captured_at"])
    if study_window is not None and not study_window.contains(captured_at):
        raise ValueError(f"captured_at {format_timestamp(captured_at)} outside study window")
    lat = _finite(row["lat"], "lat")
    lon = _finite(row["lon"], "lon")
    bounds.check(lat, lon, "frame location")
    heading = normalize_heading(_finite(row["heading_deg"], "heading_deg"))
    detected = parse_bool(row["detected"])
    raw_conf = row.get("confidence")
    confidence = None
    if raw_conf not in (None, ""):
        confidence = _finite(raw_conf, "confidence")
        if not 0.0 <= confidence <= 1.0:
            raise ValueError(f"confidence {confidence} outside [0, 1]")
    demoted = False
    if detected:
        if confidence is None:
            raise ValueError("detected frame without confidence")
        if confidence < confidence_threshold:
            detected, demoted = False, True
    if not detected:
        confidence = None
    return FrameRecord(frame_id, captured_at, GeoPoint(lat, lon), heading, detected, confidence), demoted


def _iter_rows(stream, fmt: str):
    """Yield ``(line_number, row_dict_or_exception)`` from a binary stream."""
    if fmt == "jsonl":
        for n, raw in enumerate(stream, start=1):
            try:
                text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
                if not text.strip():
                    continue
                obj = json.loads(text)
                if not isinstance(obj, dict):
                    raise ValueError("line is not a JSON object")
                yield n, obj
            except ValueError as exc:
                yield n, exc
    elif fmt == "csv":
        wrapped = not isinstance(stream, io.TextIOBase)
        text = io.TextIOWrapper(stream, encoding="utf-8", newline="") if wrapped else stream
        try:
            reader = csv.DictReader(text)
            if reader.fieldnames is None:
                return
            absent = set(REQUIRED_FRAME_FIELDS) - set(reader.fieldnames)
            if absent:
                raise SchemaError(absent)
            for row in reader:
                if not any((v or "").strip() for v in row.values() if isinstance(v, str)):
                    continue
                yield reader.line_num, row
        except UnicodeDecodeError as exc:
            raise DataError(f"input is not valid UTF-8: {exc}") from exc
        finally:
            if wrapped:
                text.detach()
    else:
        raise ConfigError(f"unknown frame format {fmt!r}; expected 'jsonl' or 'csv'")


def _parse_chunk(stream, fmt, source, opts):
    records, rejects, demoted, lines = [], [], 0, 0
    for line_no, row in _iter_rows(stream, fmt):
        lines += 1
        if isinstance(row, Exception):
            rejects.append((source, line_no, str(row)))
            continue
        try:
            rec, was_demoted = frame_from_mapping(row, **opts)
        except (ValueError, TypeError, BoundsError) as exc:
            rejects.append((source, line_no, str(exc)))
            continue
        records.append(rec)
        demoted += was_demoted
    return records, rejects, demoted, lines


def dataset_digest(frames: Iterable[FrameRecord]) -> str:
    h = hashlib.sha256()
    for f in frames:
        h.update(json.dumps(f.to_json(), sort_keys=True, separators=(",", ":")).encode())
        h.update(b"\n")
    return h.hexdigest()


def _assemble(chunks, max_reject_rate) -> DetectionDataset:
    records, rejects, demoted, lines = [], [], 0, 0
    for r, rj, d, n in chunks:
        records.extend(r)
        rejects.extend(rj)
        demoted += d
        lines += n
    if rejects and len(rejects) > max_reject_rate * lines:
        shown = "; ".join(f"{src}:{ln}: {why}" for src, ln, why in rejects[:10])
        raise DataError(
            f"{len(rejects)} of {lines} frame rows malformed "
            f"(limit {max_reject_rate:.2%}); first offenders: {shown}"
        )
    records.sort(key=FrameRecord.sort_key)
    seen = set()
    for rec in records:
        if rec.frame_id in seen:
            raise DataError(f"duplicate frame_id {rec.frame_id!r}")
        seen.add(rec.frame_id)
    if rejects:
        log.warning("excluded %d malformed frame rows of %d", len(rejects), lines)
    return DetectionDataset(records, dataset_digest(records), len(rejects), rejects, demoted, lines)


def parse_frames(
    stream,
    fmt: str = "jsonl",
    *,
    confidence_threshold: float = DEFAULT_CONFIDENCE_THRESHOLD,
    bounds: BoundingBox = NYC_BOUNDS,
    study_window: Optional[StudyWindow] = None,
    max_reject_rate: float = DEFAULT_MAX_REJECT_RATE,
    source: str = "<stream>",
) -> DetectionDataset:
    """Parse a binary JSONL/CSV stream into a chronologically sorted dataset."""
    opts = dict(confidence_threshold=confidence_threshold, bounds=bounds, study_window=study_window)
    return _assemble([_parse_chunk(stream, fmt, source, opts)], max_reject_rate)


def frame_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix in (".jsonl", ".ndjson", ".json"):
        return "jsonl"
    if suffix == ".csv":
        return "csv"
    raise ConfigError(f"cannot infer frame format from {path}")


def _parse_file(path, opts):
    with open(path, "rb") as fh:
        return _parse_chunk(fh, frame_format(path), str(path), opts)


def load_frames(
    paths,
    *,
    workers: int = 1,
    confidence_threshold: float = DEFAULT_CONFIDENCE_THRESHOLD,
    bounds: BoundingBox = NYC_BOUNDS,
    study_window: Optional[StudyWindow] = None,
    max_reject_rate: float = DEFAULT_MAX_REJECT_RATE,
) -> DetectionDataset:
    """Load one or more frame files; files are parsed in parallel when ``workers > 1``."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    opts = dict(confidence_threshold=confidence_threshold, bounds=bounds, study_window=study_window)
    if workers > 1 and len(paths) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_parse_file, paths, [opts] * len(paths)))
    else:
        chunks = [_parse_file(p, opts) for p in paths]
    return _assemble(chunks, max_reject_rate)


def write_frames_jsonl(frames: Iterable[FrameRecord], fh) -> None:
    for f in frames:
        fh.write(json.dumps(f.to_json(), separators=(",", ":")) + "\n")


# --------------------------------------------------------------------------- permits


@dataclass(frozen=True, slots=True)
class PermitRecord:
    permit_id: str
    location: GeoPoint
    issued_on: date
    expires_on: date
    borough: Borough
    renewed: bool = False


DEFAULT_PERMIT_COLUMNS = {
    "permit_id": "Job Number",
    "lat": "Latitude Point",
    "lon": "Longitude Point",
    "issued_on": "First Permit Date",
    "expires_on": "Expiration Date",
    "borough": "Borough Name",
    "renewed": "Permit Renewed",
}
OPTIONAL_PERMIT_FIELDS = {"renewed"}


@dataclass(frozen=True)
class ColumnMap:
    columns: dict = field(default_factory=lambda: dict(DEFAULT_PERMIT_COLUMNS))
    type_column: Optional[str] = None
    include_types: Optional[frozenset] = None

    @classmethod
    def from_json(cls, obj: dict) -> ColumnMap:
        columns = dict(DEFAULT_PERMIT_COLUMNS)
        columns.update(obj.get("columns", {}))
        unknown = set(columns) - set(DEFAULT_PERMIT_COLUMNS)
        if unknown:
            raise ConfigError(f"unknown permit fields in column map: {sorted(unknown)}")
        include = obj.get("include_types")
        return cls(columns, obj.get("type_column"), frozenset(include) if include is not None else None)

    @classmethod
    def load(cls, path) -> ColumnMap:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass
class PermitSet:
    records: list[PermitRecord]
    rejected: int = 0
    duplicates: int = 0
    excluded_by_type: int = 0

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


def parse_date(text) -> date:
    s = str(text).strip()
    if re.match(r"^\d{4}-\d{2}-\d{2}", s):
        return date.fromisoformat(s[:10])
    return datetime.strptime(s.split()[0], "%m/%d/%Y").date()


def format_date(d: date) -> str:
    return d.strftime("%m/%d/%Y")


def permit_from_row(row: dict, cmap: ColumnMap, bounds: BoundingBox = NYC_BOUNDS) -> PermitRecord:
    c = cmap.columns
    permit_id = (row.get(c["permit_id"]) or "").strip()
    if not permit_id:
        raise ValueError("empty permit id")
    lat = _finite(row[c["lat"]], "lat")
    lon = _finite(row[c["lon"]], "lon")
    bounds.check(lat, lon, "permit location")
    issued = parse_date(row[c["issued_on"]])
    expires = parse_date(row[c["expires_on"]])
    if expires < issued:
        raise ValueError(f"expires {expires} before issued {issued}")
    borough = Borough.parse(row[c["borough"]])
    renewed = parse_bool(row.get(c["renewed"]) or "")
    return PermitRecord(permit_id, GeoPoint(lat, lon), issued, expires, borough, renewed)


def parse_permits(stream, cmap: Optional[ColumnMap] = None, *, bounds: BoundingBox = NYC_BOUNDS) -> PermitSet:
    """Parse a permit CSV (binary or text stream).

    Rows with unusable coordinates, dates or borough names are dropped and
    counted.  Repeated permit ids collapse to the record with the latest
    expiration date.
    """
    cmap = cmap or ColumnMap()
    if isinstance(stream, io.TextIOBase):
        return _parse_permit_text(stream, cmap, bounds)
    text = io.TextIOWrapper(stream, encoding="utf-8", newline="")
    try:
        return _parse_permit_text(text, cmap, bounds)
    except UnicodeDecodeError as exc:
        raise DataError(f"permit file is not valid UTF-8: {exc}") from exc
    finally:
        text.detach()


def _parse_permit_text(text, cmap: ColumnMap, bounds: BoundingBox) -> PermitSet:
    reader = csv.DictReader(text)
    header = reader.fieldnames or []
    required = {col for key, col in cmap.columns.items() if key not in OPTIONAL_PERMIT_FIELDS}
    if cmap.include_types is not None and cmap.type_column:
        required.add(cmap.type_column)
    missing = required - set(header)
    if missing:
        raise SchemaError(missing)

    best: dict[str, PermitRecord] = {}
    rejected = duplicates = excluded = 0
    for row in reader:
        if cmap.include_types is not None and cmap.type_column:
            if (row.get(cmap.type_column) or "").strip() not in cmap.include_types:
                excluded += 1
                continue
        try:
            rec = permit_from_row(row, cmap, bounds)
        except (ValueError, TypeError, KeyError, BoundsError) as exc:
            log.debug("permit row %d rejected: %s", reader.line_num, exc)
            rejected += 1
            continue
        prev = best.get(rec.permit_id)
        if prev is not None:
            duplicates += 1
            if rec.expires_on <= prev.expires_on:
                continue
        best[rec.permit_id] = rec
    records = [best[k] for k in sorted(best)]
    return PermitSet(records, rejected, duplicates, excluded)


def load_permits(path, cmap: Optional[ColumnMap] = None, *, bounds: BoundingBox = NYC_BOUNDS) -> PermitSet:
    with open(path, "rb") as fh:
        return parse_permits(fh, cmap, bounds=bounds)


def write_permits_csv(permits: Iterable[PermitRecord], fh, cmap: Optional[ColumnMap] = None) -> None:
    c = (cmap or ColumnMap()).columns
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow([c[k] for k in DEFAULT_PERMIT_COLUMNS])
    for p in permits:
        writer.writerow([
            p.permit_id, repr(p.location.lat), repr(p.location.lon),
            format_date(p.issued_on), format_date(p.expires_on), p.borough.value.upper(),
            "Y" if p.renewed else "N",
        ])


def filter_active(permits: Iterable[PermitRecord], as_of: date) -> list[PermitRecord]:
    return [p for p in permits if p.expires_on >= as_of]


# --------------------------------------------------------------------------- open-data client


def _get_with_retry(client, url, params, headers, max_attempts, backoff_base, backoff_factor, sleep):
    status = None
    for attempt in range(max_attempts):
        if attempt:
            sleep(backoff_base * backoff_factor ** (attempt - 1))
        try:
            resp = client.get(url, params=params, headers=headers)
        except httpx.TransportError as exc:
            log.warning("request to %s failed (%s), attempt %d/%d", url, exc, attempt + 1, max_attempts)
            continue
        status = resp.status_code
        if status < 400:
            return resp.text
        if status != 429 and status < 500:
            raise FetchError(f"GET {url} returned HTTP {status}", status)
        log.warning("GET %s returned HTTP %d, attempt %d/%d", url, status, attempt + 1, max_attempts)
    raise FetchError(f"GET {url} failed after {max_attempts} attempts (last status {status})", status)


def fetch_permits(
    endpoint: str,
    page_size: int = 50_000,
    app_token: Optional[str] = None,
    *,
    cmap: Optional[ColumnMap] = None,
    bounds: BoundingBox = NYC_BOUNDS,
    client: Optional[httpx.Client] = None,
    max_attempts: int = 3,
    backoff_base: float = 1.0,
    backoff_factor: float = 2.0,
    sleep=time.sleep,
) -> PermitSet:
    """Page through a CSV open-data endpoint with ``$limit``/``$offset``.

    Stops at the first short page.  The concatenated pages are handed to
    :func:`parse_permits`, so the result is identical to parsing a single
    download of the same rows.
    """
    if not 1 <= page_size <= 50_000:
        raise ConfigError(f"page_size must be in [1, 50000], got {page_size}")
    headers = {APP_TOKEN_HEADER: app_token} if app_token else {}
    owns = client is None
    client = client or httpx.Client(timeout=60.0)
    header_row, rows, offset = None, [], 0
    try:
        while True:
            params = {"$limit": page_size, "$offset": offset, "$order": ":id"}
            text = _get_with_retry(client, endpoint, params, headers, max_attempts, backoff_base, backoff_factor, sleep)
            page = [r for r in csv.reader(io.StringIO(text)) if r]
            if page:
                if header_row is None:
                    header_row = page[0]
                elif page[0] != header_row:
                    raise DataError(f"header changed at offset {offset}")
                data = page[1:]
            else:
                data = []
            rows.extend(data)
            if len(data) < page_size:
                break
            offset += page_size
    finally:
        if owns:
            client.close()
    if header_row is None:
        return PermitSet([])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header_row)
    writer.writerows(rows)
    buf.seek(0)
    return parse_permits(buf, cmap, bounds=bounds)
