import csv
import io
import json
import random
from datetime import date, datetime, timezone

import httpx
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from longwatch.errors import ConfigError, DataError, FetchError, SchemaError
from longwatch.ingest import (
    Borough,
    ColumnMap,
    StudyWindow,
    dataset_digest,
    fetch_permits,
    filter_active,
    load_frames,
    parse_frames,
    parse_permits,
    parse_timestamp,
    write_frames_jsonl,
    write_permits_csv,
)

from conftest import PERMIT_HEADER, frame_row, jsonl_bytes, permit_at


# ----------------------------------------------------------------- frames

def test_empty_stream():
    ds = parse_frames(io.BytesIO(b""))
    assert len(ds) == 0 and ds.rejected == 0


def test_sorted_by_time_then_id():
    rows = [frame_row("c", 5), frame_row("a", 9), frame_row("b", 1), frame_row("aa", 5)]
    ds = parse_frames(jsonl_bytes(rows))
    assert [f.frame_id for f in ds] == ["b", "aa", "c", "a"]


def test_out_of_range_confidence_is_malformed():
    rows = [frame_row(f"f{i}", i) for i in range(120)]
    rows[40] = frame_row("bad", 40, detected=True, confidence=1.3)
    ds = parse_frames(jsonl_bytes(rows))
    assert len(ds) == 119
    assert ds.rejected == 1
    assert "bad" not in {f.frame_id for f in ds}
    assert ds.rejects[0][1] == 41 and "confidence" in ds.rejects[0][2]


def test_too_many_malformed_lines_fail_with_offenders():
    rows = [frame_row(f"f{i}", i) for i in range(50)] + [{"frame_id": f"x{i}"} for i in range(12)]
    with pytest.raises(DataError) as err:
        parse_frames(jsonl_bytes(rows))
    msg = str(err.value)
    assert "12 of 62" in msg
    assert msg.count("missing") == 10


def test_duplicate_frame_id_fails():
    with pytest.raises(DataError, match="duplicate"):
        parse_frames(jsonl_bytes([frame_row("a", 1), frame_row("a", 2)]))


def test_low_confidence_demoted():
    rows = [frame_row("a", 0, detected=True, confidence=0.84), frame_row("b", 1, detected=True, confidence=0.85)]
    ds = parse_frames(jsonl_bytes(rows))
    a, b = ds.frames
    assert (a.detected, a.confidence) == (False, None)
    assert (b.detected, b.confidence) == (True, 0.85)
    assert ds.demoted == 1


def test_csv_matches_jsonl():
    rows = [frame_row(f"f{i}", 10 - i, heading=i * 37.0, detected=i % 2 == 0, confidence=0.9 if i % 2 == 0 else None)
            for i in range(10)]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(frame_row("x", detected=True, confidence=1).keys()))
    w.writeheader()
    for r in rows:
        w.writerow({**r, "detected": str(r["detected"]).lower()})
    via_csv = parse_frames(io.BytesIO(buf.getvalue().encode()), "csv")
    via_jsonl = parse_frames(jsonl_bytes(rows))
    assert via_csv.frames == via_jsonl.frames
    assert via_csv.source_digest == via_jsonl.source_digest


def test_csv_missing_columns():
    with pytest.raises(SchemaError) as err:
        parse_frames(io.BytesIO(b"frame_id,lat\nx,40.7\n"), "csv")
    assert "captured_at" in str(err.value)


def test_study_window_rejects_outside():
    window = StudyWindow(datetime(2023, 11, 1, tzinfo=timezone.utc), datetime(2023, 11, 1, 1, tzinfo=timezone.utc))
    rows = [frame_row(f"f{i}", i % 60) for i in range(200)]
    rows.append(frame_row("late", 24 * 60))
    ds = parse_frames(jsonl_bytes(rows), study_window=window)
    assert ds.rejected == 1 and len(ds) == 200
    assert "outside study window" in ds.rejects[0][2]


def test_timestamps():
    t = parse_timestamp("2023-11-05T14:30:00.123456Z")
    assert t == datetime(2023, 11, 5, 14, 30, 0, 123000, tzinfo=timezone.utc)
    assert parse_timestamp("2023-11-05T14:30:00") == datetime(2023, 11, 5, 14, 30, tzinfo=timezone.utc)


def test_permutation_invariance():
    rows = [frame_row(f"f{i:03d}", i % 7, lat=40.7 + i * 1e-4, heading=i * 11.0,
                      detected=i % 3 == 0, confidence=0.95 if i % 3 == 0 else None) for i in range(60)]
    base = parse_frames(jsonl_bytes(rows))
    rng = random.Random(3)
    for _ in range(10):
        shuffled = rows[:]
        rng.shuffle(shuffled)
        ds = parse_frames(jsonl_bytes(shuffled), source="other-name")
        assert ds.frames == base.frames
        assert ds.source_digest == base.source_digest == dataset_digest(base.frames)


def test_sharded_load_matches_single(tmp_path):
    rows = [frame_row(f"f{i:03d}", i, detected=i % 4 == 0, confidence=0.9 if i % 4 == 0 else None) for i in range(80)]
    paths = []
    for k in range(4):
        p = tmp_path / f"part{k}.jsonl"
        p.write_bytes(jsonl_bytes(rows[k::4]).getvalue())
        paths.append(p)
    one = load_frames(paths, workers=1)
    two = load_frames(paths, workers=2)
    assert one.frames == two.frames == parse_frames(jsonl_bytes(rows)).frames


def test_write_read_round_trip():
    rows = [frame_row(f"f{i}", i, detected=i == 2, confidence=0.91 if i == 2 else None) for i in range(5)]
    ds = parse_frames(jsonl_bytes(rows))
    buf = io.StringIO()
    write_frames_jsonl(ds.frames, buf)
    again = parse_frames(io.BytesIO(buf.getvalue().encode()))
    assert again.frames == ds.frames


fuzz_value = st.one_of(st.none(), st.text(max_size=6), st.floats(allow_nan=True), st.integers(-1000, 1000), st.booleans())


@settings(max_examples=200, suppress_health_check=[HealthCheck.too_slow])
@given(st.lists(st.fixed_dictionaries({
    "frame_id": st.one_of(st.text(min_size=0, max_size=4), st.integers()),
    "captured_at": st.one_of(st.just("2023-11-05T14:30:00.000Z"), st.text(max_size=10), st.none()),
    "lat": st.one_of(st.floats(40.0, 41.5), fuzz_value),
    "lon": st.one_of(st.floats(-74.5, -73.5), fuzz_value),
    "heading_deg": st.one_of(st.floats(-720, 720), fuzz_value),
    "detected": st.one_of(st.booleans(), st.sampled_from(["yes", "0", "maybe"])),
    "confidence": st.one_of(st.floats(-1, 2), fuzz_value),
}), max_size=25))
def test_fuzzed_rows_never_yield_invalid_records(rows):
    seen_ids = set()
    unique = []
    for r in rows:
        key = str(r["frame_id"]).strip()
        if key in seen_ids:
            continue
        seen_ids.add(key)
        unique.append(r)
    data = "".join(json.dumps(r) + "\n" for r in unique).encode()
    try:
        ds = parse_frames(io.BytesIO(data), max_reject_rate=1.0)
    except DataError:
        return
    assert ds.rejected + len(ds) == len(unique)
    for f in ds:
        assert f.frame_id
        assert 40.45 <= f.location.lat <= 40.95 and -74.30 <= f.location.lon <= -73.65
        assert 0 <= f.heading < 360
        assert (f.confidence is not None) == f.detected
        if f.detected:
            assert 0.85 <= f.confidence <= 1


# ----------------------------------------------------------------- permits

def permit_csv(rows):
    return io.BytesIO((PERMIT_HEADER + "".join(",".join(r) + "\n" for r in rows)).encode())


FIVE = [
    ["P1", "40.71", "-74.00", "01/02/2023", "06/01/2024", "MANHATTAN", "N"],
    ["P2", "40.68", "-73.95", "2023-03-04", "2024-02-01", "BROOKLYN", "Y"],
    ["P3", "40.85", "-73.88", "05/06/2023", "05/06/2024", "BRONX", ""],
    ["P4", "40.73", "-73.80", "07/08/2023", "12/31/2024", "QUEENS", "N"],
    ["P5", "40.58", "-74.15", "09/10/2023", "09/10/2024", "STATEN ISLAND", "N"],
]


def test_five_row_fixture():
    ps = parse_permits(permit_csv(FIVE))
    assert len(ps) == 5 and ps.rejected == 0
    assert [p.borough for p in ps] == [Borough.MANHATTAN, Borough.BROOKLYN, Borough.BRONX, Borough.QUEENS, Borough.STATEN_ISLAND]
    assert ps[1].renewed and not ps[0].renewed
    assert ps[0].issued_on == date(2023, 1, 2)


def test_expiry_before_issue_rejected():
    ps = parse_permits(permit_csv([FIVE[0], ["P9", "40.71", "-74.0", "06/01/2024", "01/01/2024", "MANHATTAN", "N"]]))
    assert len(ps) == 1 and ps.rejected == 1


def test_bad_rows_counted():
    bad = [["Q1", "abc", "-74.0", "01/01/2023", "01/01/2024", "MANHATTAN", "N"],
           ["Q2", "42.0", "-74.0", "01/01/2023", "01/01/2024", "MANHATTAN", "N"],
           ["Q3", "40.7", "-74.0", "13/45/2023", "01/01/2024", "MANHATTAN", "N"],
           ["Q4", "40.7", "-74.0", "01/01/2023", "01/01/2024", "ATLANTIS", "N"]]
    ps = parse_permits(permit_csv(FIVE + bad))
    assert len(ps) == 5 and ps.rejected == 4


def test_duplicate_keeps_latest_expiry():
    rows = [["D", "40.71", "-74.0", "01/01/2023", "03/01/2024", "MANHATTAN", "N"],
            ["D", "40.72", "-74.0", "01/01/2023", "09/01/2024", "MANHATTAN", "Y"],
            ["D", "40.73", "-74.0", "01/01/2023", "05/01/2024", "MANHATTAN", "N"]]
    ps = parse_permits(permit_csv(rows))
    assert len(ps) == 1 and ps.duplicates == 2
    assert ps[0].expires_on == date(2024, 9, 1) and ps[0].location.lat == 40.72


def test_missing_columns_named():
    with pytest.raises(SchemaError) as err:
        parse_permits(io.BytesIO(b"Job Number,Latitude Point\nP1,40.7\n"))
    assert "Expiration Date" in str(err.value) and "Borough Name" in str(err.value)


def test_renewed_column_optional():
    text = "Job Number,Latitude Point,Longitude Point,First Permit Date,Expiration Date,Borough Name\nP,40.7,-74.0,01/01/2023,01/01/2025,Manhattan\n"
    ps = parse_permits(io.BytesIO(text.encode()))
    assert len(ps) == 1 and ps[0].renewed is False


def test_column_map_and_type_filter():
    cmap = ColumnMap.from_json({"columns": {"permit_id": "job"}, "type_column": "kind", "include_types": ["SH"]})
    text = ("job,Latitude Point,Longitude Point,First Permit Date,Expiration Date,Borough Name,kind\n"
            "A,40.7,-74.0,01/01/2023,01/01/2025,Manhattan,SH\n"
            "B,40.7,-74.0,01/01/2023,01/01/2025,Manhattan,FN\n")
    ps = parse_permits(io.BytesIO(text.encode()), cmap)
    assert [p.permit_id for p in ps] == ["A"] and ps.excluded_by_type == 1
    with pytest.raises(ConfigError):
        ColumnMap.from_json({"columns": {"nonsense": "x"}})


def test_permit_csv_round_trip():
    ps = parse_permits(permit_csv(FIVE))
    buf = io.StringIO()
    write_permits_csv(ps, buf)
    assert parse_permits(io.StringIO(buf.getvalue())).records == ps.records


def test_filter_active():
    keep = permit_at("K", 0, 0, expires=date(2024, 6, 1))
    drop = permit_at("D", 0, 0, expires=date(2023, 1, 1))
    edge = permit_at("E", 0, 0, expires=date(2024, 1, 22))
    assert filter_active([keep, drop, edge], date(2024, 1, 22)) == [keep, edge]
    assert filter_active([], date(2024, 1, 22)) == []


# ----------------------------------------------------------------- fetch

def paged_server(rows, fail_first=0, status=500, log=None):
    state = {"fails": fail_first}

    def handler(request):
        if log is not None:
            log.append(request)
        if state["fails"]:
            state["fails"] -= 1
            return httpx.Response(status)
        limit = int(request.url.params["$limit"])
        offset = int(request.url.params["$offset"])
        body = PERMIT_HEADER + "".join(",".join(r) + "\n" for r in rows[offset:offset + limit])
        return httpx.Response(200, text=body)

    return httpx.Client(transport=httpx.MockTransport(handler))


def test_fetch_two_pages():
    log = []
    ps = fetch_permits("https://data.example/resource.csv", page_size=3, client=paged_server(FIVE[:4], log=log))
    assert len(ps) == 4 and len(log) == 2
    assert [r.url.params["$offset"] for r in log] == ["0", "3"]


def test_fetch_matches_parse():
    log = []
    fetched = fetch_permits("https://x/y.csv", page_size=2, client=paged_server(FIVE, log=log))
    assert fetched.records == parse_permits(permit_csv(FIVE)).records
    assert len(log) == 3


def test_fetch_exact_multiple_needs_empty_page():
    log = []
    ps = fetch_permits("https://x/y.csv", page_size=2, client=paged_server(FIVE[:4], log=log))
    assert len(ps) == 4 and len(log) == 3


def test_fetch_empty():
    log = []
    ps = fetch_permits("https://x/y.csv", page_size=10, client=paged_server([], log=log))
    assert len(ps) == 0 and len(log) == 1


def test_fetch_server_error_after_retries():
    log, naps = [], []
    with pytest.raises(FetchError) as err:
        fetch_permits("https://x/y.csv", client=paged_server(FIVE, fail_first=99, log=log), sleep=naps.append)
    assert err.value.status == 500
    assert len(log) == 3 and naps == [1.0, 2.0]


def test_fetch_recovers_from_transient_error():
    naps = []
    ps = fetch_permits("https://x/y.csv", client=paged_server(FIVE, fail_first=2, status=503), sleep=naps.append)
    assert len(ps) == 5 and naps == [1.0, 2.0]


def test_fetch_client_error_not_retried():
    log = []
    with pytest.raises(FetchError) as err:
        fetch_permits("https://x/y.csv", client=paged_server(FIVE, fail_first=1, status=403, log=log), sleep=lambda s: None)
    assert err.value.status == 403 and len(log) == 1


def test_fetch_sends_token():
    log = []
    fetch_permits("https://x/y.csv", app_token="s3cret", client=paged_server(FIVE, log=log))
    assert log[0].headers["X-App-Token"] == "s3cret"
    log.clear()
    fetch_permits("https://x/y.csv", client=paged_server(FIVE, log=log))
    assert "X-App-Token" not in log[0].headers


def test_fetch_schema_drift():
    def handler(request):
        return httpx.Response(200, text="Job Number,Latitude Point\nP,40.7\n")
    with pytest.raises(SchemaError):
        fetch_permits("https://x/y.csv", client=httpx.Client(transport=httpx.MockTransport(handler)))


def test_fetch_page_size_bounds():
    with pytest.raises(ConfigError):
        fetch_permits("https://x/y.csv", page_size=0)
    with pytest.raises(ConfigError):
        fetch_permits("https://x/y.csv", page_size=50_001)
