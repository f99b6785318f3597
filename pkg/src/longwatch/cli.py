"""``longwatch`` command line.

Settings resolve as: flags > JSON config file > environment > defaults.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal
invariant violation (including a failed simulation check).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter, defaultdict
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Optional

from . import __version__
from .amplify import BaseMetrics, pr_curve, select_threshold
from .areas import AreaIndex, load_areas
from .curation import (
    BoroughDistribution,
    CurationConfig,
    candidates_from_matches,
    kl_divergence,
    label_boroughs,
    near_permit_filter,
    stratified_sample,
)
from .errors import BoundsError, ConfigError, DataError, FetchError, InvariantViolation, LongwatchError
from .evaluate import build_report, impact_factor
from .export import (
    VERDICT_COLUMNS,
    clusters_geojson,
    ensure_dir,
    impact_geojson,
    verdict_rows,
    verdicts_geojson,
    write_csv,
    write_json,
)
from .geo import GeoPoint, GridConfig
from .ingest import (
    APP_TOKEN_ENV,
    BOROUGH_ORDER,
    Borough,
    ColumnMap,
    fetch_permits,
    filter_active,
    format_timestamp,
    load_frames,
    load_permits,
    write_permits_csv,
)
from .simulate import DetectorModel, end_to_end_check, frames_jsonl, gen_frames, gen_world, monte_carlo_tail
from .tagging import TaggingParams, run_tagging

log = logging.getLogger("longwatch")

DEFAULTS = {
    "frames": None,
    "permits": None,
    "boroughs": None,
    "areas": None,
    "column_map": None,
    "out": "longwatch-out",
    "as_of": "2024-01-22",
    "seed": 0,
    "origin_lat": 40.7128,
    "origin_lon": -74.0060,
    "cell_size_ft": 80.0,
    "displacement_ft": 60.0,
    "region_size_ft": 320.0,
    "visibility_radius_ft": 120.0,
    "window": 20,
    "threshold": 6,
    "confidence_threshold": 0.85,
    "max_reject_rate": 0.01,
    "max_distance_m": 100.0,
    "angle_tolerance_deg": 45.0,
    "per_borough_quota": None,
    "total": 2214,
    "rule": "last",
    "workers": 1,
    "figures": True,
    "endpoint": None,
    "page_size": 50000,
    "app_token": None,
    "recall": 0.5676,
    "precision": 0.9329,
    "borough_property": "borough",
    "area_property": "area_id",
    "sheds": 500,
    "unpermitted": 0,
    "passes": 20,
    "fp_rate": 0.0,
    "background": 0,
    "draws": 1_000_000,
    "emit_world": False,
}

ENV_KEYS = {
    "app_token": APP_TOKEN_ENV,
    "out": "LONGWATCH_OUT",
    "as_of": "LONGWATCH_AS_OF",
    "seed": "LONGWATCH_SEED",
    "workers": "LONGWATCH_WORKERS",
}

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    flat = {}
    for k, v in raw.items():
        if isinstance(v, dict) and k in ("grid", "tagging", "curation", "simulate"):
            flat.update(v)
        else:
            flat[k] = v
    unknown = set(flat) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return flat


def resolve_settings(args: argparse.Namespace, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    settings = dict(DEFAULTS)
    for key, var in ENV_KEYS.items():
        if environ.get(var):
            settings[key] = environ[var]
    if getattr(args, "config", None):
        settings.update(_load_config_file(args.config))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


@dataclass
class RunConfig:
    settings: dict
    grid: GridConfig
    curation: CurationConfig
    as_of: date
    out: Path
    seed: int

    @classmethod
    def from_settings(cls, s: dict) -> RunConfig:
        try:
            grid = GridConfig(
                origin=GeoPoint(float(s["origin_lat"]), float(s["origin_lon"])),
                cell_size_ft=float(s["cell_size_ft"]),
                displacement_ft=float(s["displacement_ft"]),
                region_size_ft=float(s["region_size_ft"]),
                visibility_radius_ft=float(s["visibility_radius_ft"]),
            )
            quota = {Borough.parse(k): int(v) for k, v in (s["per_borough_quota"] or {}).items()}
            curation = CurationConfig(float(s["max_distance_m"]), float(s["angle_tolerance_deg"]), quota)
            as_of = date.fromisoformat(str(s["as_of"]))
            seed = int(s["seed"])
        except BoundsError as exc:
            raise ConfigError(str(exc)) from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid setting: {exc}") from None
        if s["rule"] not in ("last", "any"):
            raise ConfigError("rule must be 'last' or 'any'")
        return cls(s, grid, curation, as_of, Path(s["out"]), seed)

    @property
    def tagging(self) -> TaggingParams:
        try:
            return TaggingParams(int(self.settings["window"]), int(self.settings["threshold"]))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid tagging setting: {exc}") from None

    def require(self, *keys):
        for key in keys:
            value = self.settings.get(key)
            if not value:
                raise ConfigError(f"--{key.replace('_', '-')} is required")
            paths = value if isinstance(value, list) else [value]
            for p in paths:
                if not Path(p).exists():
                    raise ConfigError(f"{key} file not found: {p}")

    def optional_path(self, key) -> Optional[str]:
        value = self.settings.get(key)
        if value and not Path(value).exists():
            raise ConfigError(f"{key} file not found: {value}")
        return value or None

    def output_dir(self) -> Path:
        try:
            return ensure_dir(self.out)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {self.out}: {exc}") from None

    # ------------------------------------------------------------------ loaders

    def frames(self):
        paths = self.settings["frames"]
        return load_frames(
            paths if isinstance(paths, list) else [paths],
            workers=int(self.settings["workers"]),
            confidence_threshold=float(self.settings["confidence_threshold"]),
            bounds=self.grid.bounds,
            max_reject_rate=float(self.settings["max_reject_rate"]),
        )

    def permits(self):
        cmap_path = self.optional_path("column_map")
        cmap = ColumnMap.load(cmap_path) if cmap_path else None
        return load_permits(self.settings["permits"], cmap, bounds=self.grid.bounds)

    def boroughs(self) -> Optional[AreaIndex]:
        path = self.optional_path("boroughs")
        return AreaIndex(load_areas(path, self.settings["borough_property"])) if path else None


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------- commands


def cmd_validate(rc: RunConfig) -> int:
    given = [k for k in ("frames", "permits", "boroughs") if rc.settings.get(k)]
    if not given:
        raise ConfigError("nothing to validate; pass --frames and/or --permits")
    rc.require(*given)
    boroughs = rc.boroughs()
    out = rc.output_dir()
    summary: dict = {}
    monthly = []
    ds = rc.frames() if rc.settings.get("frames") else None
    if ds is not None:
        summary["frames"] = {
            "records": len(ds),
            "rejected": ds.rejected,
            "demoted_below_confidence": ds.demoted,
            "positive": sum(f.detected for f in ds),
            "digest": ds.source_digest,
            "time_range": [format_timestamp(t) for t in ds.time_range] if ds.time_range else None,
        }
        months: dict[str, list] = defaultdict(lambda: [0, 0, set()])
        for f in ds:
            key = f.captured_at.strftime("%Y-%m")
            months[key][0] += 1
            months[key][1] += f.detected
            months[key][2].add(f.captured_at.date())
        monthly = [(m, v[0], v[1], len(v[2])) for m, v in sorted(months.items())]
        summary["monthly"] = [dict(zip(("month", "frames", "detections", "days_of_coverage"), r)) for r in monthly]
        write_csv(out / "monthly.csv", ("month", "frames", "detections", "days_of_coverage"), monthly)
        if boroughs is not None:
            counts = Counter(boroughs.locate(f.location.lon, f.location.lat) or "_unassigned" for f in ds)
            total = sum(counts.values()) or 1
            rows = [(name, n, round(n / total, 4)) for name, n in sorted(counts.items())]
            summary["frames"]["by_borough"] = {name: n for name, n, _ in rows}
            write_csv(out / "frames_by_borough.csv", ("borough", "frames", "share"), rows)

    if rc.settings.get("permits"):
        ps = rc.permits()
        active = filter_active(ps, rc.as_of)
        summary["permits"] = {
            "records": len(ps),
            "rejected": ps.rejected,
            "duplicates_merged": ps.duplicates,
            "active": len(active),
            "by_borough": {b.value: sum(p.borough is b for p in active) for b in BOROUGH_ORDER},
        }

    write_json(summary, out / "validation.json")
    if rc.settings["figures"] and monthly:
        from .plotting import plot_monthly

        plot_monthly(monthly, out / "monthly.png")
    _emit(summary)
    return EXIT_OK


def cmd_curate(rc: RunConfig) -> int:
    rc.require("frames", "permits")
    boroughs = rc.boroughs()
    out = rc.output_dir()
    ds = rc.frames()
    active = filter_active(rc.permits(), rc.as_of)
    matches = near_permit_filter(ds.frames, active, rc.curation, rc.grid)
    by_frame = {m.frame.frame_id: m for m in matches}
    if boroughs is not None:
        candidates = label_boroughs([m.frame for m in matches], boroughs)
    else:
        candidates = candidates_from_matches(matches)

    if rc.curation.per_borough_quota:
        target = BoroughDistribution({b: float(rc.curation.per_borough_quota.get(b, 0)) for b in BOROUGH_ORDER})
    else:
        if not active:
            raise DataError("no active permits to derive a target borough distribution from")
        target = BoroughDistribution.from_counts(p.borough for p in active)
    try:
        sample = stratified_sample(candidates, target, int(rc.settings["total"]), rc.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    label = dict((f.frame_id, b) for f, b in candidates)
    rows = []
    for f in sample.frames:
        m = by_frame[f.frame_id]
        rows.append((f.frame_id, format_timestamp(f.captured_at), label[f.frame_id].value, m.permit.permit_id,
                     round(m.distance_m, 3), round(m.bearing_gap_deg, 3)))
    write_csv(out / "selected_frames.csv",
              ("frame_id", "captured_at", "borough", "permit_id", "distance_m", "bearing_gap_deg"), rows)

    observed = BoroughDistribution.from_counts(label[f.frame_id] for f in sample.frames) if sample.frames else None
    result = {
        "candidates": len(candidates),
        "selected": len(sample.frames),
        "counts": {b.value: n for b, n in sample.counts.items()},
        "shortfall": {b.value: n for b, n in sample.shortfall.items()},
        "target_share": {b.value: round(w, 6) for b, w in target.normalized().items()},
    }
    if observed is not None:
        for name, p, q in (("kl_permits_vs_sample", target, observed), ("kl_sample_vs_permits", observed, target)):
            try:
                result[name] = kl_divergence(p, q)
            except LongwatchError:
                result[name] = None
    write_json(result, out / "curation.json")
    if rc.settings["figures"] and observed is not None:
        from .plotting import plot_borough_shares

        tn, on = target.normalized(), observed.normalized()
        plot_borough_shares([b.value for b in BOROUGH_ORDER], [tn.get(b, 0) for b in BOROUGH_ORDER],
                            [on.get(b, 0) for b in BOROUGH_ORDER], out / "borough_shares.png")
    _emit(result)
    return EXIT_OK


def _tag(rc: RunConfig, ds):
    return run_tagging(ds.frames, rc.grid, rc.tagging, workers=int(rc.settings["workers"]))


def cmd_tag(rc: RunConfig) -> int:
    rc.require("frames")
    out = rc.output_dir()
    ds = rc.frames()
    verdicts = _tag(rc, ds)
    write_csv(out / "verdicts.csv", VERDICT_COLUMNS, verdict_rows(verdicts))
    write_json(verdicts_geojson(verdicts, rc.grid), out / "verdicts.geojson")
    summary = {
        "frames": len(ds),
        "cells": len(verdicts),
        "confirmed_any_window": sum(v.confirmed for v in verdicts),
        "confirmed_last_window": sum(v.last_window_confirmed for v in verdicts),
        "insufficient_coverage": sum(v.insufficient_coverage for v in verdicts),
        "window": rc.tagging.window,
        "threshold": rc.tagging.threshold,
    }
    write_json(summary, out / "tag_summary.json")
    if rc.settings["figures"]:
        from .plotting import plot_confirmation_delay

        plot_confirmation_delay(verdicts, out / "confirmation_delay.png")
    _emit(summary)
    return EXIT_OK


def cmd_thresholds(rc: RunConfig) -> int:
    window = int(rc.settings["window"])
    if window < 1:
        raise UsageError(f"window must be at least 1, got {window}")
    base = BaseMetrics(float(rc.settings["recall"]), float(rc.settings["precision"]))
    out = rc.output_dir()
    curve = pr_curve(base, window)
    best = select_threshold(base, window)
    write_csv(out / "pr_curve.csv", ("threshold", "recall", "precision"),
              ((m.threshold, repr(m.recall), repr(m.precision)) for m in curve))
    result = {
        "base_recall": base.recall,
        "base_precision": base.precision,
        "window": window,
        "threshold": best.threshold,
        "recall": best.recall,
        "precision": best.precision,
        "f1": best.f1,
    }
    write_json(result, out / "threshold.json")
    if rc.settings["figures"]:
        from .plotting import plot_pr_curve

        plot_pr_curve(curve, best, out / "pr_curve.png")
    _emit(result)
    return EXIT_OK


def cmd_evaluate(rc: RunConfig) -> int:
    rc.require("frames", "permits")
    boroughs = rc.boroughs()
    areas_path = rc.optional_path("areas")
    out = rc.output_dir()
    ds = rc.frames()
    active = filter_active(rc.permits(), rc.as_of)
    verdicts = _tag(rc, ds)
    report = build_report(verdicts, active, ds.frames, rc.grid, boroughs=boroughs, rule=rc.settings["rule"],
                          min_frames=rc.tagging.window)
    write_json(report.to_json(), out / "report.json")
    write_json(clusters_geojson(report.clusters, rc.grid, report.cluster_boroughs), out / "unpermitted.geojson")
    cols = ("tagged_total", "confirmed_permitted", "unpermitted_clusters", "out_of_scope_permits", "missed_permits")
    write_csv(out / "per_borough.csv", ("borough",) + cols,
              ((name,) + tuple(getattr(c, k) for k in cols) for name, c in sorted(report.per_borough.items())))
    if areas_path:
        areas = load_areas(areas_path, rc.settings["area_property"])
        factors = impact_factor(active, areas, rc.as_of)
        write_json(impact_geojson(factors, areas), out / "impact.geojson")
    if rc.settings["figures"]:
        from .plotting import plot_evaluation

        plot_evaluation(report, out / "evaluation.png")
    sys.stdout.write(report.summary_text() + "\n")
    return EXIT_OK


def cmd_impact(rc: RunConfig) -> int:
    rc.require("permits", "areas")
    out = rc.output_dir()
    areas = load_areas(rc.settings["areas"], rc.settings["area_property"])
    factors = impact_factor(filter_active(rc.permits(), rc.as_of), areas, rc.as_of)
    write_json(impact_geojson(factors, areas), out / "impact.geojson")
    write_csv(out / "impact.csv", ("area_id", "summed_age_days", "permit_count"),
              ((f.area_id, f.summed_age_days, f.permit_count) for f in factors))
    _emit({f.area_id: f.summed_age_days for f in factors})
    return EXIT_OK


def cmd_fetch_permits(rc: RunConfig) -> int:
    endpoint = rc.settings.get("endpoint")
    if not endpoint:
        raise ConfigError("--endpoint is required")
    cmap_path = rc.optional_path("column_map")
    cmap = ColumnMap.load(cmap_path) if cmap_path else None
    out = rc.output_dir()
    permits = fetch_permits(endpoint, int(rc.settings["page_size"]), rc.settings.get("app_token"),
                            cmap=cmap, bounds=rc.grid.bounds)
    with open(out / "permits.csv", "w", encoding="utf-8", newline="") as fh:
        write_permits_csv(permits, fh)
    result = {"records": len(permits), "rejected": permits.rejected, "duplicates_merged": permits.duplicates}
    write_json(result, out / "fetch.json")
    _emit(result)
    return EXIT_OK


def cmd_simulate(rc: RunConfig) -> int:
    s = rc.settings
    detector = DetectorModel(float(s["recall"]), float(s["fp_rate"]))
    out = rc.output_dir()
    result = end_to_end_check(
        int(s["sheds"]), int(s["unpermitted"]), int(s["passes"]), detector, rc.tagging, rc.seed, rc.grid,
        n_background=int(s["background"]),
    )
    report = result.to_json()
    draws = int(s["draws"])
    if draws > 0:
        mc = monte_carlo_tail(detector.recall, rc.tagging.window, rc.tagging.threshold, draws, rc.seed,
                              workers=int(s["workers"]))
        se = (result.analytic * (1 - result.analytic) / draws) ** 0.5
        report["monte_carlo"] = {"draws": draws, "empirical": mc, "analytic": result.analytic,
                                 "standard_error": se, "delta": mc - result.analytic}
        if abs(mc - result.analytic) > 4 * se + 1e-12:
            result.failures.append("Monte Carlo tail disagrees with the binomial model")
            report["failures"] = list(result.failures)
            report["verdict"] = "FAIL"
    write_json(report, out / "simulation.json")
    if s["emit_world"]:
        world = gen_world(int(s["sheds"]), int(s["unpermitted"]), seed=rc.seed, cfg=rc.grid)
        frames = gen_frames(world, int(s["passes"]), detector, seed=rc.seed + 1, n_background=int(s["background"]))
        (out / "frames.jsonl").write_text(frames_jsonl(frames), encoding="utf-8")
        (out / "permits.csv").write_text(world.permit_csv(), encoding="utf-8")
    if s["figures"]:
        from .plotting import plot_simulation

        plot_simulation(result, out / "simulation.png")
    _emit({k: report[k] for k in ("verdict", "empirical_recall", "analytic_recall", "delta", "sigma", "failures")})
    return EXIT_OK if not result.failures else EXIT_INTERNAL


COMMANDS = {
    "validate": cmd_validate,
    "curate": cmd_curate,
    "tag": cmd_tag,
    "thresholds": cmd_thresholds,
    "evaluate": cmd_evaluate,
    "fetch-permits": cmd_fetch_permits,
    "simulate": cmd_simulate,
    "impact": cmd_impact,
}


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--as-of", dest="as_of", help="reference date, YYYY-MM-DD")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--no-figures", dest="figures", action="store_const", const=False)
    g = p.add_argument_group("grid")
    g.add_argument("--origin-lat", type=float)
    g.add_argument("--origin-lon", type=float)
    g.add_argument("--cell-size", dest="cell_size_ft", type=float)
    g.add_argument("--displacement", dest="displacement_ft", type=float)
    g.add_argument("--region-size", dest="region_size_ft", type=float)
    g.add_argument("--visibility-radius", dest="visibility_radius_ft", type=float)
    t = p.add_argument_group("tagging")
    t.add_argument("--window", type=int)
    t.add_argument("--threshold", type=int)


def _add_inputs(p, *names):
    if "frames" in names:
        p.add_argument("--frames", nargs="+", help="frame JSONL/CSV file(s)")
        p.add_argument("--confidence-threshold", type=float)
        p.add_argument("--max-reject-rate", type=float)
    if "permits" in names:
        p.add_argument("--permits", help="permit CSV")
        p.add_argument("--column-map", help="JSON column map for the permit CSV")
    if "boroughs" in names:
        p.add_argument("--boroughs", help="borough boundary GeoJSON")
        p.add_argument("--borough-property")
    if "areas" in names:
        p.add_argument("--areas", help="neighbourhood polygons GeoJSON")
        p.add_argument("--area-property")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="longwatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", help="parse inputs and summarise coverage")
    _add_common(p)
    _add_inputs(p, "frames", "permits", "boroughs")

    p = sub.add_parser("curate", help="select frames near active permits for annotation")
    _add_common(p)
    _add_inputs(p, "frames", "permits", "boroughs")
    p.add_argument("--total", type=int)
    p.add_argument("--max-distance", dest="max_distance_m", type=float)
    p.add_argument("--angle-tolerance", dest="angle_tolerance_deg", type=float)

    p = sub.add_parser("tag", help="confirm grid cells from frame detections")
    _add_common(p)
    _add_inputs(p, "frames")

    p = sub.add_parser("thresholds", help="amplified precision/recall for every threshold")
    _add_common(p)
    p.add_argument("--recall", type=float)
    p.add_argument("--precision", type=float)

    p = sub.add_parser("evaluate", help="match confirmations against permits")
    _add_common(p)
    _add_inputs(p, "frames", "permits", "boroughs", "areas")
    p.add_argument("--rule", choices=("last", "any"))

    p = sub.add_parser("fetch-permits", help="download permits from an open-data endpoint")
    _add_common(p)
    p.add_argument("--endpoint")
    p.add_argument("--page-size", type=int)
    p.add_argument("--app-token")
    p.add_argument("--column-map")

    p = sub.add_parser("simulate", help="synthetic-world check of the pipeline against the binomial model")
    _add_common(p)
    p.add_argument("--sheds", type=int)
    p.add_argument("--unpermitted", type=int)
    p.add_argument("--passes", type=int)
    p.add_argument("--recall", type=float)
    p.add_argument("--fp-rate", dest="fp_rate", type=float)
    p.add_argument("--background", type=int)
    p.add_argument("--draws", type=int)
    p.add_argument("--emit-world", dest="emit_world", action="store_const", const=True)

    p = sub.add_parser("impact", help="summed permit age per neighbourhood polygon")
    _add_common(p)
    _add_inputs(p, "permits", "areas")
    return parser


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        rc = RunConfig.from_settings(resolve_settings(args))
        return COMMANDS[args.command](rc)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, exc)
    except (DataError, FetchError, BoundsError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        return _fail(EXIT_DATA, exc)
    except InvariantViolation as exc:
        return _fail(EXIT_INTERNAL, exc)
    except Exception as exc:  # noqa: BLE001
        log.debug("unexpected failure", exc_info=True)
        return _fail(EXIT_INTERNAL, exc)


if __name__ == "__main__":
    sys.exit(main())
