"""Shared synthetic-data builders for the test suite."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from personforge.corpus import ImageRecord
from personforge.detect import PersonBox
from personforge.geometry import BBox


def write_png(path: Path, width: int, height: int, seed: int = 0) -> np.ndarray:
    """Write a random RGB image and return its pixel array."""
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    Image.fromarray(pixels, "RGB").save(path)
    return pixels


def make_record(
    image_id: str,
    width: int = 64,
    height: int = 48,
    path: str = "",
    lat: float | None = None,
    lon: float | None = None,
    timestamp: int | None = None,
    source_city: str | None = None,
) -> ImageRecord:
    return ImageRecord(
        image_id=image_id,
        path=path or f"{image_id}.png",
        width=width,
        height=height,
        lat=lat,
        lon=lon,
        timestamp=timestamp,
        source_city=source_city,
    )


def make_box(
    box_id: str = "img0#0",
    image_id: str | None = None,
    box: BBox | None = None,
    score: float = 0.9,
    provenance: str = "imported",
) -> PersonBox:
    return PersonBox(
        box_id=box_id,
        image_id=image_id or box_id.split("#")[0],
        box=box or BBox(1.0, 2.0, 10.0, 20.0),
        detector_score=score,
        provenance=provenance,
    )


def write_jsonl(path: Path, rows: list[dict]) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row))
            fh.write("\n")
    return path


def manifest_row(
    image_id: str,
    width: int = 64,
    height: int = 48,
    lat: float | None = None,
    lon: float | None = None,
    timestamp: int | None = None,
    path: str | None = None,
) -> dict:
    row = {
        "image_id": image_id,
        "path": path or f"{image_id}.png",
        "width": width,
        "height": height,
    }
    if lat is not None:
        row["lat"] = lat
    if lon is not None:
        row["lon"] = lon
    if timestamp is not None:
        row["timestamp"] = timestamp
    return row


def detection_row(image_id: str, label: str, score: float, box: list[float]) -> dict:
    return {"image_id": image_id, "label": label, "score": score, "box": box}


def random_bbox(rng: np.random.Generator, extent: float = 100.0) -> BBox:
    x = float(rng.uniform(0, extent))
    y = float(rng.uniform(0, extent))
    w = float(rng.uniform(0.1, extent))
    h = float(rng.uniform(0.1, extent))
    return BBox(x, y, w, h)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def build_disk_corpus(
    root: Path,
    n_images: int = 20,
    image_w: int = 96,
    image_h: int = 72,
    seed: int = 7,
) -> dict:
    """Materialize a small corpus: PNGs, manifest, city table, detections.

    Images 0..n-3 sit near city "alpha" (large, kept), n-3..n-2 near
    "beta" (small, excluded), and the last one carries no geo tag.
    Detections mix person/other labels and scores around the 0.8 line.
    """
    root.mkdir(parents=True, exist_ok=True)
    images_dir = root / "images"
    images_dir.mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)

    manifest_rows = []
    det_rows = []
    for i in range(n_images):
        image_id = f"img{i:03d}"
        write_png(images_dir / f"{image_id}.png", image_w, image_h, seed=seed + i)
        if i < n_images - 3:
            lat, lon = 10.0 + 0.01 * i, 10.0 + 0.01 * i
        elif i < n_images - 1:
            lat, lon = 30.0, 30.0
        else:
            lat = lon = None
        manifest_rows.append(
            manifest_row(
                image_id,
                width=image_w,
                height=image_h,
                lat=lat,
                lon=lon,
                timestamp=1_600_000_000 + i,
            )
        )
        # two person boxes per image, one above and one below threshold
        x = float(rng.uniform(0, image_w - 30))
        y = float(rng.uniform(0, image_h - 40))
        det_rows.append(detection_row(image_id, "person", 0.95, [x, y, 20.0, 35.0]))
        det_rows.append(detection_row(image_id, "person", 0.5, [5.0, 5.0, 10.0, 12.0]))
        det_rows.append(detection_row(image_id, "car", 0.99, [1.0, 1.0, 30.0, 20.0]))

    manifest = write_jsonl(root / "manifest.jsonl", manifest_rows)
    detections = write_jsonl(root / "detections.jsonl", det_rows)
    cities = root / "cities.json"
    cities.write_text(
        json.dumps(
            [
                {"city_id": "alpha", "lat": 10.0, "lon": 10.0, "radius_km": 80.0},
                {"city_id": "beta", "lat": 30.0, "lon": 30.0, "radius_km": 80.0},
            ]
        )
    )
    return {
        "root": root,
        "images_dir": images_dir,
        "manifest": manifest,
        "detections": detections,
        "cities": cities,
        "n_images": n_images,
        "image_w": image_w,
        "image_h": image_h,
    }


def write_zero_model(path: Path, dim: int = 96) -> Path:
    """An accept-all refiner: w = 0, b = 0 scores every crop at the margin."""
    from personforge.refine import LinearModel, save_model

    save_model(LinearModel(w=np.zeros(dim), b=0.0, training_meta={}), path)
    return path


def write_pipeline_config(root: Path, model_path: Path | None = None, **extra) -> Path:
    """Write a run config next to a build_disk_corpus layout.

    Relative paths inside resolve against `root` (the config's directory).
    """
    cfg = {
        "manifest": "manifest.jsonl",
        "detections": "detections.jsonl",
        "cities": "cities.json",
        "min_city_count": 5,
        "images_root": "images",
        "output": "out/dataset.json",
        "seed": 0,
    }
    if model_path is not None:
        cfg["model"] = str(model_path)
    cfg.update(extra)
    path = root / "config.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path
