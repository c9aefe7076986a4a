"""Dataset serialization and composition statistics.

The interchange container is a COCO-style JSON document: images[] with
per-image geo/time metadata in an ``extra`` object, annotations[] with
``bbox`` as [x, y, w, h] and the box_id as the annotation id, and a
single "person" category. Images with zero surviving boxes are omitted.
Output is written with sorted keys and sorted ids so identical inputs
produce byte-identical files.

Statistics count two classes (person/background) regardless of content,
matching how detection datasets are conventionally sized.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import ImageRecord
from .detect import PersonBox, UnknownImage
from .geometry import BBox

PERSON_CATEGORY_ID = 1
UNASSIGNED_CITY = "unassigned"


@dataclass
class DatasetStats:
    """Table-style composition counts for an emitted dataset."""

    n_original_images: int = 0
    n_boxes: int = 0
    n_classes: int = 2
    per_city: dict[str, tuple[int, int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "n_original_images": self.n_original_images,
            "n_boxes": self.n_boxes,
            "n_classes": self.n_classes,
            "per_city": {
                city: {"images": imgs, "boxes": boxes}
                for city, (imgs, boxes) in sorted(self.per_city.items())
            },
        }


def dataset_stats(
    boxes: Sequence[PersonBox],
    images: Mapping[str, ImageRecord],
) -> DatasetStats:
    """Pure counting: images with >= 1 box, boxes, and per-city breakdowns.

    Images whose record has no source_city are grouped under
    "unassigned". Invariant under permutation of the box sequence.
    """
    boxes_per_image: dict[str, int] = {}
    for box in boxes:
        if box.image_id not in images:
            raise UnknownImage(box.image_id)
        boxes_per_image[box.image_id] = boxes_per_image.get(box.image_id, 0) + 1

    per_city: dict[str, list[int]] = {}
    for image_id, count in boxes_per_image.items():
        city = images[image_id].source_city or UNASSIGNED_CITY
        bucket = per_city.setdefault(city, [0, 0])
        bucket[0] += 1
        bucket[1] += count

    return DatasetStats(
        n_original_images=len(boxes_per_image),
        n_boxes=len(boxes),
        n_classes=2,
        per_city={city: (imgs, cnt) for city, (imgs, cnt) in per_city.items()},
    )


def _image_entry(rec: ImageRecord) -> dict:
    extra: dict = {}
    if rec.lat is not None:
        extra["lat"] = rec.lat
        extra["lon"] = rec.lon
    if rec.timestamp is not None:
        extra["timestamp"] = rec.timestamp
    if rec.source_city is not None:
        extra["city"] = rec.source_city
    return {
        "id": rec.image_id,
        "file_name": rec.path,
        "width": rec.width,
        "height": rec.height,
        "extra": extra,
    }


def _annotation_entry(box: PersonBox) -> dict:
    return {
        "id": box.box_id,
        "image_id": box.image_id,
        "bbox": box.box.as_list(),
        "category_id": PERSON_CATEGORY_ID,
        "score": box.detector_score,
        "provenance": box.provenance,
    }


def emit_dataset(
    boxes: Sequence[PersonBox],
    images: Mapping[str, ImageRecord],
    out_path: str | Path,
    stats_path: str | Path | None = None,
) -> DatasetStats:
    """Write the COCO-style dataset document plus a stats JSON.

    Returns the stats. stats_path defaults to out_path with a
    ``.stats.json`` suffix appended to the stem.
    """
    out_path = Path(out_path)
    stats = dataset_stats(boxes, images)

    populated = sorted({b.image_id for b in boxes})
    doc = {
        "categories": [{"id": PERSON_CATEGORY_ID, "name": "person"}],
        "images": [_image_entry(images[image_id]) for image_id in populated],
        "annotations": [
            _annotation_entry(b)
            for b in sorted(boxes, key=lambda b: (b.image_id, b.box_id))
        ],
    }
    write_json_atomic(doc, out_path)

    if stats_path is None:
        stats_path = out_path.with_name(out_path.stem + ".stats.json")
    write_json_atomic(stats.to_json(), stats_path)
    return stats


def write_json_atomic(obj, path: str | Path) -> None:
    # interrupted writes leave a .partial file, never a truncated target
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_dataset(path: str | Path) -> tuple[list[PersonBox], dict[str, ImageRecord]]:
    """Read back an emitted dataset into boxes plus image records."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    images: dict[str, ImageRecord] = {}
    for entry in doc.get("images", []):
        extra = entry.get("extra", {})
        rec = ImageRecord(
            image_id=str(entry["id"]),
            path=str(entry.get("file_name", "")),
            width=int(entry["width"]),
            height=int(entry["height"]),
            lat=extra.get("lat"),
            lon=extra.get("lon"),
            timestamp=extra.get("timestamp"),
            source_city=extra.get("city"),
        )
        images[rec.image_id] = rec
    boxes = [
        PersonBox(
            box_id=str(a["id"]),
            image_id=str(a["image_id"]),
            box=BBox(*(float(v) for v in a["bbox"])),
            detector_score=float(a.get("score", 1.0)),
            provenance=str(a.get("provenance", "imported")),
        )
        for a in doc.get("annotations", [])
    ]
    return boxes, images
