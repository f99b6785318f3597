import csv
import json

import httpx
import pytest

from longwatch import cli, ingest
from longwatch.geo import PlanePoint, unproject

from conftest import PERMIT_HEADER


def run(argv, capsys):
    code = cli.main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def polygon_fc(prop, names_and_boxes):
    feats = []
    for name, (x0, y0, x1, y1) in names_and_boxes:
        sw, ne = unproject(PlanePoint(x0, y0)), unproject(PlanePoint(x1, y1))
        ring = [[sw.lon, sw.lat], [ne.lon, sw.lat], [ne.lon, ne.lat], [sw.lon, ne.lat], [sw.lon, sw.lat]]
        feats.append({"type": "Feature", "properties": {prop: name}, "geometry": {"type": "Polygon", "coordinates": [ring]}})
    return {"type": "FeatureCollection", "features": feats}


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("world")
    code = cli.main(["simulate", "--sheds", "12", "--unpermitted", "2", "--recall", "1", "--passes", "24",
                     "--background", "50", "--draws", "1000", "--emit-world", "--seed", "3", "--out", str(d),
                     "--no-figures"])
    assert code == 0
    (d / "boroughs.geojson").write_text(json.dumps(polygon_fc("borough", [
        ("Manhattan", (-20000, -20000, 0, 20000)), ("Brooklyn", (0, -20000, 20000, 20000))])))
    (d / "areas.geojson").write_text(json.dumps(polygon_fc("area_id", [
        ("MN01", (-20000, -20000, 0, 20000)), ("BK01", (0, -20000, 20000, 20000))])))
    return d


def test_simulate_writes_report(world_dir):
    rep = json.loads((world_dir / "simulation.json").read_text())
    assert rep["verdict"] == "PASS" and rep["delta"] == 0.0
    assert rep["evaluation"]["unpermitted_clusters"] == 2


def test_simulate_default_passes(tmp_path, capsys):
    code, out, _ = run(["simulate", "--out", str(tmp_path), "--draws", "200000"], capsys)
    assert code == 0 and json.loads(out)["verdict"] == "PASS"
    assert (tmp_path / "simulation.png").stat().st_size > 0


def test_simulate_bad_threshold_is_usage_error(tmp_path, capsys):
    code, _, err = run(["simulate", "--threshold", "30", "--out", str(tmp_path)], capsys)
    assert code == 1 and json.loads(err)["exit_code"] == 1


def test_validate(world_dir, tmp_path, capsys):
    code, out, _ = run(["validate", "--frames", str(world_dir / "frames.jsonl"), "--permits",
                        str(world_dir / "permits.csv"), "--boroughs", str(world_dir / "boroughs.geojson"),
                        "--out", str(tmp_path)], capsys)
    assert code == 0
    summary = json.loads((tmp_path / "validation.json").read_text())
    assert summary["frames"]["rejected"] == 0
    with open(tmp_path / "monthly.csv") as fh:
        months = list(csv.DictReader(fh))
    assert len(months) >= 2 and sum(int(m["frames"]) for m in months) == 12 * 24 + 2 * 24 + 50
    assert (tmp_path / "monthly.png").exists()


def test_validate_two_months(tmp_path, capsys):
    rows = [{"frame_id": f"a{i}", "captured_at": ts, "lat": 40.71, "lon": -74.0, "heading_deg": 0, "detected": False}
            for i, ts in enumerate(["2023-11-05T00:00:00.000Z", "2023-12-05T00:00:00.000Z", "2023-12-06T00:00:00.000Z"])]
    f = tmp_path / "f.jsonl"
    f.write_text("".join(json.dumps(r) + "\n" for r in rows))
    code, _, _ = run(["validate", "--frames", str(f), "--out", str(tmp_path / "o"), "--no-figures"], capsys)
    assert code == 0
    with open(tmp_path / "o" / "monthly.csv") as fh:
        assert [r["month"] for r in csv.DictReader(fh)] == ["2023-11", "2023-12"]


def test_missing_permits_file_named(tmp_path, capsys):
    code, _, err = run(["validate", "--permits", str(tmp_path / "nope.csv"), "--out", str(tmp_path)], capsys)
    assert code == 1 and "nope.csv" in json.loads(err)["message"]


def test_malformed_frames_exit_2(tmp_path, capsys):
    f = tmp_path / "bad.jsonl"
    f.write_text("{not json}\n" * 5)
    code, _, err = run(["tag", "--frames", str(f), "--out", str(tmp_path)], capsys)
    assert code == 2 and json.loads(err)["error"] == "DataError"


def test_thresholds_defaults(tmp_path, capsys):
    code, out, _ = run(["thresholds", "--out", str(tmp_path)], capsys)
    assert code == 0 and json.loads(out)["threshold"] == 6
    with open(tmp_path / "pr_curve.csv") as fh:
        rows = {int(r["threshold"]): (float(r["recall"]), float(r["precision"])) for r in csv.DictReader(fh)}
    assert len(rows) == 20
    for th, (rec, prec) in {5: (0.9991, 0.9910), 6: (0.9959, 0.9984), 7: (0.9856, 0.9998)}.items():
        assert abs(rows[th][0] - rec) <= 5e-5 and abs(rows[th][1] - prec) <= 5e-5


def test_thresholds_perfect_and_usage(tmp_path, capsys):
    code, out, _ = run(["thresholds", "--recall", "1", "--precision", "1", "--out", str(tmp_path), "--no-figures"], capsys)
    assert code == 0 and json.loads(out)["threshold"] == 20
    code, _, _ = run(["thresholds", "--window", "0", "--out", str(tmp_path)], capsys)
    assert code == 1
    code, _, _ = run(["thresholds", "--bogus"], capsys)
    assert code == 1


def test_tag_and_rerun_is_byte_identical(world_dir, tmp_path, capsys):
    args = ["tag", "--frames", str(world_dir / "frames.jsonl")]
    assert run(args + ["--out", str(tmp_path / "a")], capsys)[0] == 0
    assert run(args + ["--out", str(tmp_path / "b"), "--workers", "2"], capsys)[0] == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "confirmation_delay.png" in names and "verdicts.geojson" in names
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    gj = json.loads((tmp_path / "a" / "verdicts.geojson").read_text())
    assert sum(f["properties"]["confirmed"] for f in gj["features"]) >= 14


def test_tag_empty_frames(tmp_path, capsys):
    f = tmp_path / "empty.jsonl"
    f.write_text("")
    assert run(["tag", "--frames", str(f), "--out", str(tmp_path / "o")], capsys)[0] == 0
    assert json.loads((tmp_path / "o" / "verdicts.geojson").read_text()) == {"type": "FeatureCollection", "features": []}


def test_evaluate_recovers_planted_world(world_dir, tmp_path, capsys):
    code, out, _ = run(["evaluate", "--frames", str(world_dir / "frames.jsonl"), "--permits", str(world_dir / "permits.csv"),
                        "--boroughs", str(world_dir / "boroughs.geojson"), "--areas", str(world_dir / "areas.geojson"),
                        "--as-of", "2024-01-10", "--out", str(tmp_path)], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert (rep["confirmed_permitted"], rep["unpermitted_clusters"], rep["tagged_total"]) == (12, 2, 14)
    assert rep["missed_permits"] == 0 and rep["out_of_scope_permits"] == 0
    clusters = json.loads((tmp_path / "unpermitted.geojson").read_text())
    assert len(clusters["features"]) == 2
    assert {f["properties"]["borough"] for f in clusters["features"]} <= {"Manhattan", "Brooklyn"}
    assert (tmp_path / "per_borough.csv").exists() and (tmp_path / "impact.geojson").exists()
    assert "unpermitted" in out


def test_evaluate_no_confirmations(world_dir, tmp_path, capsys):
    f = tmp_path / "frames.jsonl"
    f.write_text("".join(
        line.replace('"detected":true', '"detected":false').replace(',"confidence":', ',"x":')
        for line in (world_dir / "frames.jsonl").read_text().splitlines(keepends=True)))
    code, _, _ = run(["evaluate", "--frames", str(f), "--permits", str(world_dir / "permits.csv"),
                      "--out", str(tmp_path / "o"), "--no-figures"], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["tagged_total"] == 0 and rep["missed_permits"] == rep["in_scope_permits"] == 12


def test_impact_before_issue_dates(world_dir, tmp_path, capsys):
    code, out, _ = run(["impact", "--permits", str(world_dir / "permits.csv"), "--areas", str(world_dir / "areas.geojson"),
                        "--as-of", "2015-01-01", "--out", str(tmp_path)], capsys)
    assert code == 0 and set(json.loads(out).values()) == {0}


def test_curate(world_dir, tmp_path, capsys):
    args = ["curate", "--frames", str(world_dir / "frames.jsonl"), "--permits", str(world_dir / "permits.csv"),
            "--total", "100", "--as-of", "2024-01-10", "--seed", "4"]
    assert run(args + ["--out", str(tmp_path / "a")], capsys)[0] == 0
    assert run(args + ["--out", str(tmp_path / "b")], capsys)[0] == 0
    a = (tmp_path / "a" / "selected_frames.csv").read_bytes()
    assert a == (tmp_path / "b" / "selected_frames.csv").read_bytes()
    assert a.count(b"\n") == 101
    result = json.loads((tmp_path / "a" / "curation.json").read_text())
    assert result["selected"] == 100 and sum(result["counts"].values()) == 100
    assert 0 <= result["kl_permits_vs_sample"] < 0.01 and 0 <= result["kl_sample_vs_permits"] < 0.01


def test_curate_deficit_is_data_error(world_dir, tmp_path, capsys):
    code, _, err = run(["curate", "--frames", str(world_dir / "frames.jsonl"), "--permits", str(world_dir / "permits.csv"),
                        "--total", "100000", "--as-of", "2024-01-10", "--out", str(tmp_path)], capsys)
    assert code in (1, 2) and "deficit" in json.loads(err)["message"]


def test_config_precedence(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"tagging": {"window": 10}, "recall": 1.0, "precision": 1.0}))
    monkeypatch.setenv("LONGWATCH_OUT", str(tmp_path / "from-env"))
    code, out, _ = run(["thresholds", "--config", str(cfg), "--no-figures"], capsys)
    assert code == 0 and json.loads(out)["threshold"] == 10
    assert (tmp_path / "from-env" / "threshold.json").exists()
    code, out, _ = run(["thresholds", "--config", str(cfg), "--window", "12", "--out", str(tmp_path / "flag"),
                        "--no-figures"], capsys)
    assert json.loads(out)["threshold"] == 12 and (tmp_path / "flag" / "threshold.json").exists()
    cfg.write_text(json.dumps({"colour": "red"}))
    assert run(["thresholds", "--config", str(cfg)], capsys)[0] == 1


def test_fetch_permits_uses_env_token(tmp_path, capsys, monkeypatch):
    seen = []
    body = PERMIT_HEADER + "P1,40.71,-74.0,01/01/2023,06/01/2024,MANHATTAN,N\n"

    def handler(request):
        seen.append(request)
        return httpx.Response(200, text=body)

    real = httpx.Client
    monkeypatch.setattr(ingest.httpx, "Client", lambda **kw: real(transport=httpx.MockTransport(handler)))
    monkeypatch.setenv("LONGWATCH_APP_TOKEN", "tok")
    code, out, _ = run(["fetch-permits", "--endpoint", "https://data.example/x.csv", "--out", str(tmp_path)], capsys)
    assert code == 0 and json.loads(out)["records"] == 1
    assert seen[0].headers["X-App-Token"] == "tok"
    assert (tmp_path / "permits.csv").read_text().startswith("Job Number")


def test_fetch_permits_server_error_exit_2(tmp_path, capsys, monkeypatch):
    real = httpx.Client
    monkeypatch.setattr(ingest.httpx, "Client",
                        lambda **kw: real(transport=httpx.MockTransport(lambda r: httpx.Response(404))))
    code, _, err = run(["fetch-permits", "--endpoint", "https://x/y.csv", "--out", str(tmp_path)], capsys)
    assert code == 2 and "404" in json.loads(err)["message"]
