"""Axis-aligned bounding-box arithmetic shared by the whole pipeline.

Boxes are stored as (x, y, w, h) with continuous (real-valued)
coordinates; pixel rasterization happens only in :func:`crop_region`,
where coordinates are rounded to nearest integer with ties toward +inf.
Areas are computed as w*h on the continuous coordinates (no +1
convention), matching the IoU used by detection benchmarks.

All operations are pure functions on immutable values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ClampCollapsed(ValueError):
    """Clamping a box to the image left no positive-area region."""


class OutOfBounds(ValueError):
    """A crop request extends past the image boundary."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: top-left corner (x, y) plus width and height.

    Invariant: w > 0 and h > 0. Coordinates may be fractional.
    """

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes, in [0, 1].

    Symmetric; 0 for disjoint boxes (edge contact counts as disjoint
    since the intersection has zero area). All areas use the same
    edge-difference form so iou(a, a) is exactly 1.0.
    """
    ix = min(a.x2, b.x2) - max(a.x, b.x)
    iy = min(a.y2, b.y2) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a.x2 - a.x) * (a.y2 - a.y)
    area_b = (b.x2 - b.x) * (b.y2 - b.y)
    return inter / (area_a + area_b - inter)


def boxes_disjoint(a: BBox, b: BBox) -> bool:
    """True when the two boxes share no positive-area overlap (IoU = 0)."""
    return (
        a.x >= b.x2 or b.x >= a.x2 or a.y >= b.y2 or b.y >= a.y2
    )


def clamp_to_image(b: BBox, img_w: float, img_h: float) -> BBox:
    """Clamp a box to lie fully inside [0, img_w] x [0, img_h].

    A box already inside is returned unchanged (same object).
    Raises ClampCollapsed when the box lies entirely outside the image.
    """
    if img_w <= 0 or img_h <= 0:
        raise ValueError(f"image dimensions must be positive, got {img_w}x{img_h}")
    x1 = max(b.x, 0.0)
    y1 = max(b.y, 0.0)
    x2 = min(b.x2, img_w)
    y2 = min(b.y2, img_h)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise ClampCollapsed(f"box {b.as_list()} lies outside a {img_w}x{img_h} image")
    if x1 == b.x and y1 == b.y and x2 == b.x2 and y2 == b.y2:
        return b
    return BBox(x1, y1, x2 - x1, y2 - y1)


def _round_half_up(v: float) -> int:
    # round to nearest, ties toward +inf
    return math.floor(v + 0.5)


def crop_region(pixels: np.ndarray, b: BBox) -> np.ndarray:
    """Extract the pixel patch covered by a box.

    `pixels` is an image array of shape (H, W) or (H, W, C). Position
    and size are rasterized independently, rounding to nearest integer
    with ties toward +inf, so the patch always has round(w) x round(h)
    pixels. Raises OutOfBounds when the rasterized box exceeds the
    image, and for sub-pixel boxes that rasterize to an empty patch.
    """
    img_h, img_w = pixels.shape[0], pixels.shape[1]
    x1 = _round_half_up(b.x)
    y1 = _round_half_up(b.y)
    pw = _round_half_up(b.w)
    ph = _round_half_up(b.h)
    if pw <= 0 or ph <= 0:
        raise OutOfBounds(f"box {b.as_list()} rasterizes to an empty patch")
    if x1 < 0 or y1 < 0 or x1 + pw > img_w or y1 + ph > img_h:
        raise OutOfBounds(f"box {b.as_list()} exceeds a {img_w}x{img_h} image")
    return pixels[y1 : y1 + ph, x1 : x1 + pw]
