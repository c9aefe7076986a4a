"""Controlled annotation-noise injection by box translation.

A chosen fraction of dataset boxes is translated to new positions that
do not overlap any of the image's original boxes (their own original
position included), turning them into pure false annotations while
conserving box count and size. Placement first rejection-samples
uniformly over valid positions; if that fails, the valid-placement
region is scanned exhaustively on a 1-pixel grid before giving up.

Everything is seeded: box selection uses the spec seed directly, and
each image gets its own RNG stream derived from (seed, image_id), so
results are deterministic even if images are processed in parallel.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .corpus import ImageRecord
from .detect import PROV_NOISE_TRANSLATED, PersonBox
from .geometry import BBox, boxes_disjoint

DEFAULT_MAX_TRIES = 100


class NoValidPlacement(RuntimeError):
    """No disjoint position exists (or none was found) for a box."""


@dataclass(frozen=True)
class NoiseSpec:
    """How much noise to inject and how to randomize it."""

    rate: float
    seed: int = 0
    max_tries: int = DEFAULT_MAX_TRIES

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"rate must be in [0, 1], got {self.rate}")
        if self.max_tries < 1:
            raise ValueError(f"max_tries must be >= 1, got {self.max_tries}")


@dataclass(frozen=True)
class NoiseLogEntry:
    """One relocation attempt: where the box was and where it went."""

    box_id: str
    old: tuple[float, float, float, float]
    new: Optional[tuple[float, float, float, float]]  # None = placement failed

    def to_json(self) -> dict:
        return {
            "box_id": self.box_id,
            "old": list(self.old),
            "new": list(self.new) if self.new is not None else "failed",
        }


def image_rng(seed: int, image_id: str) -> np.random.Generator:
    """Per-image RNG stream derived from (seed, image_id)."""
    digest = hashlib.sha256(image_id.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "big")])


def relocate_box(
    box: PersonBox,
    gt_boxes: Sequence[BBox],
    img_w: float,
    img_h: float,
    rng: np.random.Generator,
    max_tries: int = DEFAULT_MAX_TRIES,
) -> PersonBox:
    """Move a box to a uniformly random position disjoint from all gt boxes.

    Width and height are preserved; the returned box has IoU 0 against
    every box in gt_boxes (pass the original position of `box` in
    gt_boxes to forbid staying put). After max_tries rejection samples,
    the valid-placement region is scanned on a 1-pixel grid; raises
    NoValidPlacement when that also finds nothing.
    """
    w, h = box.box.w, box.box.h
    if w > img_w or h > img_h:
        raise ValueError(f"box {box.box.as_list()} does not fit in a {img_w}x{img_h} image")
    max_x = img_w - w
    max_y = img_h - h

    def ok(x: float, y: float) -> bool:
        candidate = BBox(x, y, w, h)
        return all(boxes_disjoint(candidate, g) for g in gt_boxes)

    for _ in range(max_tries):
        x = float(rng.uniform(0.0, max_x)) if max_x > 0 else 0.0
        y = float(rng.uniform(0.0, max_y)) if max_y > 0 else 0.0
        if ok(x, y):
            return replace(box, box=BBox(x, y, w, h), provenance=PROV_NOISE_TRANSLATED)

    valid = [
        (float(gx), float(gy))
        for gx in range(int(math.floor(max_x)) + 1)
        for gy in range(int(math.floor(max_y)) + 1)
        if ok(float(gx), float(gy))
    ]
    if not valid:
        raise NoValidPlacement(f"no disjoint position for box {box.box_id} in {img_w}x{img_h}")
    x, y = valid[int(rng.integers(len(valid)))]
    return replace(box, box=BBox(x, y, w, h), provenance=PROV_NOISE_TRANSLATED)


def noise_count(rate: float, n: int) -> int:
    """Boxes to move: round(rate*n) with exact halves rounding up."""
    return math.floor(rate * n + 0.5)


def inject_noise(
    boxes: Sequence[PersonBox],
    images: Mapping[str, ImageRecord],
    spec: NoiseSpec,
) -> tuple[list[PersonBox], list[NoiseLogEntry]]:
    """Translate round(rate*N) uniformly chosen boxes; leave the rest alone.

    Disjointness is enforced against the image's boxes at their
    *original* positions (the moved box's own original included).
    Placement failures keep the original box and are logged, never
    fatal. Output preserves input order and length; the log is in input
    order too. Deterministic for a fixed spec.
    """
    n = len(boxes)
    k = noise_count(spec.rate, n)
    rng = np.random.default_rng(spec.seed)
    chosen = set(int(i) for i in rng.choice(n, size=k, replace=False)) if k else set()

    originals_by_image: dict[str, list[BBox]] = {}
    for b in boxes:
        originals_by_image.setdefault(b.image_id, []).append(b.box)

    rngs: dict[str, np.random.Generator] = {}
    out: list[PersonBox] = []
    log: list[NoiseLogEntry] = []
    for i, b in enumerate(boxes):
        if i not in chosen:
            out.append(b)
            continue
        rec = images[b.image_id]
        if b.image_id not in rngs:
            rngs[b.image_id] = image_rng(spec.seed, b.image_id)
        old = tuple(b.box.as_list())
        try:
            moved = relocate_box(
                b,
                originals_by_image[b.image_id],
                rec.width,
                rec.height,
                rngs[b.image_id],
                max_tries=spec.max_tries,
            )
        except NoValidPlacement:
            out.append(b)
            log.append(NoiseLogEntry(box_id=b.box_id, old=old, new=None))
            continue
        out.append(moved)
        log.append(NoiseLogEntry(box_id=b.box_id, old=old, new=tuple(moved.box.as_list())))
    return out, log


def write_noise_log(path: str | Path, entries: Iterable[NoiseLogEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry.to_json()))
            fh.write("\n")
