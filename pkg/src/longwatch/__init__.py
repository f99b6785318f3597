"""Longitudinal confirmation of sidewalk sheds from geotagged dashcam detections."""

__version__ = "0.1.0"

from .amplify import AmplifiedMetrics, BaseMetrics, amplified_precision, amplified_recall, pr_curve, select_threshold
from .geo import GeoPoint, GridCell, GridConfig, PlanePoint
from .ingest import Borough, FrameRecord, PermitRecord, load_frames, load_permits, parse_frames, parse_permits
from .tagging import CellVerdict, TaggingParams, run_tagging

__all__ = [
    "AmplifiedMetrics", "BaseMetrics", "Borough", "CellVerdict", "FrameRecord", "GeoPoint", "GridCell",
    "GridConfig", "PermitRecord", "PlanePoint", "TaggingParams", "amplified_precision", "amplified_recall",
    "load_frames", "load_permits", "parse_frames", "parse_permits", "pr_curve", "run_tagging", "select_threshold",
]
