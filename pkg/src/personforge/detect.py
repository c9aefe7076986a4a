"""Detector-output import and person-only, score-threshold selection.

The detector itself is an external black box; it participates through a
JSONL file contract with one object per line:

    {"image_id": ..., "label": ..., "score": ..., "box": [x, y, w, h]}

Imported boxes are clamped to their image; boxes that collapse entirely
outside the image are dropped and counted in the import tally rather
than treated as fatal. Selection keeps detections labeled "person" with
score >= threshold (inclusive) and assigns deterministic box ids
``{image_id}#{k}`` where k is the 0-based per-image ordinal in
descending-score order (score ties broken by (x, y, w, h)).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import ImageRecord, ParseError
from .geometry import BBox, ClampCollapsed, clamp_to_image

PERSON_LABEL = "person"
DEFAULT_SCORE_THRESHOLD = 0.8

# PersonBox provenance values
PROV_IMPORTED = "imported"
PROV_REFINED = "refined"
PROV_NOISE_TRANSLATED = "noise-translated"


class UnknownImage(KeyError):
    """A box references an image_id absent from the manifest."""

    def __init__(self, image_id: str):
        super().__init__(image_id)
        self.image_id = image_id

    def __str__(self) -> str:
        return f"unknown image_id {self.image_id!r}"


@dataclass(frozen=True)
class Detection:
    """One scored, labeled box from the external detector."""

    image_id: str
    label: str
    score: float
    box: BBox


@dataclass(frozen=True)
class PersonBox:
    """A selected person box carried through the rest of the pipeline."""

    box_id: str
    image_id: str
    box: BBox
    detector_score: float
    provenance: str = PROV_IMPORTED


@dataclass
class ImportResult:
    """Validated detections plus the clamp-drop tally."""

    detections: list[Detection]
    n_clamp_dropped: int = 0
    warnings: list[str] = field(default_factory=list)


def import_detections(path: str | Path, manifest: Mapping[str, ImageRecord]) -> ImportResult:
    """Read a detection JSONL file, validating against the manifest.

    Boxes are clamped to image bounds; ClampCollapsed boxes are dropped
    and tallied. Raises UnknownImage for detections on images the
    manifest does not know, ParseError for malformed rows.
    """
    result = ImportResult(detections=[])
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
            image_id = obj.get("image_id")
            if image_id is None:
                raise ParseError(line_no, "image_id missing")
            image_id = str(image_id)
            if image_id not in manifest:
                raise UnknownImage(image_id)
            label = obj.get("label")
            if not label:
                raise ParseError(line_no, "label missing")
            try:
                score = float(obj["score"])
            except (KeyError, TypeError, ValueError):
                raise ParseError(line_no, f"score missing or not numeric: {obj.get('score')!r}")
            if not 0.0 <= score <= 1.0:
                raise ParseError(line_no, f"score out of range: {score}")
            raw_box = obj.get("box")
            if not isinstance(raw_box, (list, tuple)) or len(raw_box) != 4:
                raise ParseError(line_no, f"box must be [x, y, w, h], got {raw_box!r}")
            try:
                box = BBox(*(float(v) for v in raw_box))
            except (TypeError, ValueError) as exc:
                raise ParseError(line_no, f"invalid box {raw_box!r}: {exc}")
            rec = manifest[image_id]
            try:
                box = clamp_to_image(box, rec.width, rec.height)
            except ClampCollapsed:
                result.n_clamp_dropped += 1
                result.warnings.append(
                    f"line {line_no}: box {raw_box} entirely outside image {image_id} "
                    f"({rec.width}x{rec.height}); dropped"
                )
                continue
            result.detections.append(Detection(image_id=image_id, label=str(label), score=score, box=box))
    return result


def select_person_detections(
    detections: Sequence[Detection],
    threshold: float = DEFAULT_SCORE_THRESHOLD,
) -> list[PersonBox]:
    """Keep person-labeled detections with score >= threshold (inclusive).

    Output is ordered by image_id then per-image ordinal, so the result
    and its box ids are independent of the input file ordering.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    per_image: dict[str, list[Detection]] = {}
    for det in detections:
        if det.label == PERSON_LABEL and det.score >= threshold:
            per_image.setdefault(det.image_id, []).append(det)

    selected: list[PersonBox] = []
    for image_id in sorted(per_image):
        dets = sorted(
            per_image[image_id],
            key=lambda d: (-d.score, d.box.x, d.box.y, d.box.w, d.box.h),
        )
        for k, det in enumerate(dets):
            selected.append(
                PersonBox(
                    box_id=f"{image_id}#{k}",
                    image_id=image_id,
                    box=det.box,
                    detector_score=det.score,
                    provenance=PROV_IMPORTED,
                )
            )
    return selected
