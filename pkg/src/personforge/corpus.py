"""Source-image manifest ingestion and geographic selection rules.

Manifests come in two formats: JSON-lines (one object per line with
keys image_id, path, width, height, lat, lon, timestamp) and CSV with
the fixed header ``image_id,path,width,height,lat,lon,timestamp``.
lat/lon/timestamp are optional; an empty CSV field or a JSON null means
absent. Geo-tags must carry both latitude and longitude or neither.

City selection mirrors the collection rules: images are attributed to
the nearest city center within that city's assignment radius, cities
with too few images are excluded together with their images, and city
centers are checked for a minimum pairwise separation. Records without
a geo-tag (or outside every city's radius) are never attributed to a
city but stay in the corpus with source_city unset.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

EARTH_RADIUS_KM = 6371.0

DEFAULT_MIN_CITY_COUNT = 100_000
DEFAULT_MIN_SEPARATION_KM = 200.0

MANIFEST_CSV_HEADER = ["image_id", "path", "width", "height", "lat", "lon", "timestamp"]


class ParseError(ValueError):
    """A manifest or detection row failed validation."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class DuplicateId(ValueError):
    """The same image_id appeared twice in one manifest."""

    def __init__(self, image_id: str, line_no: int):
        super().__init__(f"duplicate image_id {image_id!r} at line {line_no}")
        self.image_id = image_id
        self.line_no = line_no


class MissingGeoTag(ValueError):
    """A geo operation was asked of a record without coordinates."""


@dataclass(frozen=True)
class ImageRecord:
    """One source image with its metadata.

    lat/lon are degrees (lat in [-90, 90], lon in [-180, 180]);
    timestamp is UTC seconds. All three are optional.
    """

    image_id: str
    path: str
    width: int
    height: int
    lat: Optional[float] = None
    lon: Optional[float] = None
    timestamp: Optional[float] = None
    source_city: Optional[str] = None

    @property
    def has_geo(self) -> bool:
        return self.lat is not None and self.lon is not None


@dataclass(frozen=True)
class CityDef:
    """A city center plus the radius within which images belong to it."""

    city_id: str
    lat: float
    lon: float
    radius_km: float

    def __post_init__(self) -> None:
        if not self.radius_km > 0:
            raise ValueError(f"assignment radius must be positive, got {self.radius_km}")


@dataclass
class CityReport:
    """Per-city record counts and kept/dropped status after filtering."""

    counts: dict[str, int] = field(default_factory=dict)
    kept: dict[str, bool] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            city: {"count": self.counts[city], "kept": self.kept[city]}
            for city in sorted(self.counts)
        }


def _validate_record(line_no: int, image_id, path, width, height, lat, lon, timestamp) -> ImageRecord:
    if not image_id:
        raise ParseError(line_no, "image_id missing or empty")
    try:
        width = int(width)
        height = int(height)
    except (TypeError, ValueError):
        raise ParseError(line_no, f"width/height must be integers, got {width!r}/{height!r}")
    if width <= 0 or height <= 0:
        raise ParseError(line_no, f"width/height must be positive, got {width}/{height}")
    if (lat is None) != (lon is None):
        raise ParseError(line_no, "lat and lon must be present together")
    if lat is not None:
        lat = float(lat)
        lon = float(lon)
        if not -90.0 <= lat <= 90.0:
            raise ParseError(line_no, f"latitude out of range: {lat}")
        if not -180.0 <= lon <= 180.0:
            raise ParseError(line_no, f"longitude out of range: {lon}")
    if timestamp is not None:
        timestamp = float(timestamp)
    return ImageRecord(
        image_id=str(image_id),
        path=str(path or ""),
        width=width,
        height=height,
        lat=lat,
        lon=lon,
        timestamp=timestamp,
    )


def _iter_jsonl_rows(path: Path):
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON: {exc.msg}")
            if not isinstance(obj, dict):
                raise ParseError(line_no, "row is not a JSON object")
            yield line_no, obj


def load_manifest(path: str | Path, format: str = "jsonl") -> list[ImageRecord]:
    """Load and validate an image manifest, preserving row order.

    Raises ParseError(line_no, reason) on the first malformed row and
    DuplicateId on a repeated image_id.
    """
    path = Path(path)
    records: list[ImageRecord] = []
    seen: set[str] = set()

    if format == "jsonl":
        for line_no, obj in _iter_jsonl_rows(path):
            rec = _validate_record(
                line_no,
                obj.get("image_id"),
                obj.get("path"),
                obj.get("width"),
                obj.get("height"),
                obj.get("lat"),
                obj.get("lon"),
                obj.get("timestamp"),
            )
            if rec.image_id in seen:
                raise DuplicateId(rec.image_id, line_no)
            seen.add(rec.image_id)
            records.append(rec)
    elif format == "csv":
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                return []
            if header != MANIFEST_CSV_HEADER:
                raise ParseError(1, f"unexpected CSV header {header!r}")
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(MANIFEST_CSV_HEADER):
                    raise ParseError(line_no, f"expected {len(MANIFEST_CSV_HEADER)} fields, got {len(row)}")
                vals = [v if v != "" else None for v in row]
                try:
                    rec = _validate_record(line_no, *vals)
                except ValueError as exc:
                    if isinstance(exc, ParseError):
                        raise
                    raise ParseError(line_no, str(exc))
                if rec.image_id in seen:
                    raise DuplicateId(rec.image_id, line_no)
                seen.add(rec.image_id)
                records.append(rec)
    else:
        raise ValueError(f"unknown manifest format {format!r} (expected 'jsonl' or 'csv')")
    return records


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in km on a sphere of radius 6371.0 km."""
    p1 = math.radians(lat1)
    p2 = math.radians(lat2)
    dp = math.radians(lat2 - lat1)
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


def assign_city(record: ImageRecord, cities: Sequence[CityDef]) -> Optional[str]:
    """Attribute a record to the nearest city center within its radius.

    Returns None when no city's radius contains the record. Distance
    ties break toward the lexicographically smaller city_id. Raises
    MissingGeoTag for records without coordinates.
    """
    if not record.has_geo:
        raise MissingGeoTag(f"record {record.image_id!r} has no geo-tag")
    best: Optional[tuple[float, str]] = None
    for city in cities:
        d = haversine_km(record.lat, record.lon, city.lat, city.lon)
        if d <= city.radius_km and (best is None or (d, city.city_id) < best):
            best = (d, city.city_id)
    return None if best is None else best[1]


def filter_cities(
    records: Iterable[ImageRecord],
    cities: Sequence[CityDef],
    min_count: int = DEFAULT_MIN_CITY_COUNT,
) -> tuple[list[ImageRecord], CityReport]:
    """Drop cities with fewer than min_count assigned records, and their records.

    "Fewer than" is strict: a city with exactly min_count records is
    kept. Kept records carry their city in source_city; records without
    a geo-tag or outside every city stay in the corpus with source_city
    unset. The report lists every city's count and status.
    """
    if min_count < 0:
        raise ValueError(f"min_count must be >= 0, got {min_count}")
    assigned: list[tuple[ImageRecord, Optional[str]]] = []
    counts = {c.city_id: 0 for c in cities}
    for rec in records:
        city = assign_city(rec, cities) if rec.has_geo else None
        if city is not None:
            counts[city] += 1
        assigned.append((rec, city))

    kept_status = {city: counts[city] >= min_count for city in counts}
    kept_records = [
        replace(rec, source_city=city) if city is not None else rec
        for rec, city in assigned
        if city is None or kept_status[city]
    ]
    return kept_records, CityReport(counts=counts, kept=kept_status)


def validate_separation(
    cities: Sequence[CityDef],
    min_km: float = DEFAULT_MIN_SEPARATION_KM,
) -> list[tuple[str, str, float]]:
    """List unordered city pairs closer than min_km (exactly min_km is fine)."""
    if min_km < 0:
        raise ValueError(f"min_km must be >= 0, got {min_km}")
    violations = []
    ordered = sorted(cities, key=lambda c: c.city_id)
    for i, a in enumerate(ordered):
        for b in ordered[i + 1 :]:
            d = haversine_km(a.lat, a.lon, b.lat, b.lon)
            if d < min_km:
                violations.append((a.city_id, b.city_id, d))
    return violations


def load_city_table(path: str | Path) -> list[CityDef]:
    """Read a JSON array of {city_id, lat, lon, radius_km}."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError("city table must be a JSON array")
    return [
        CityDef(
            city_id=str(entry["city_id"]),
            lat=float(entry["lat"]),
            lon=float(entry["lon"]),
            radius_km=float(entry.get("radius_km", 50.0)),
        )
        for entry in data
    ]
