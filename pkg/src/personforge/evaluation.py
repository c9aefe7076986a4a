"""Miss-rate / DET-curve detection evaluation.

Matching is greedy per image: detections in descending score order each
claim the unmatched ground-truth box with the highest IoU at or above
the threshold (IoU ties go to the earlier gt, score ties to the earlier
detection). Ground-truth boxes flagged ignore, or shorter than
min_height, never count as false negatives; a detection that claims one
is discarded from scoring instead of becoming a true or false positive.

The DET curve sweeps the score threshold over every distinct detection
score (plus +inf). Because greedy matching of the high-score detections
is unaffected by the presence of lower-score ones, one full matching
pass yields every threshold's counts. Each threshold contributes
(FPPI, miss rate) = (FP / n_images, FN / n_gt); points are reported
sorted by FPPI, and where several thresholds share an FPPI only the
lowest miss rate is kept.

The summary number is the log-average miss rate: the geometric mean of
the miss rates sampled at 9 FPPI reference points equally spaced in
log10 over [1e-2, 1], reading each reference from the curve point with
the largest FPPI not exceeding it (or the first point if none), with
zero misses clamped to 1e-10, reported as a percentage.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .corpus import ParseError
from .geometry import BBox, iou

DEFAULT_IOU_THRESH = 0.5
DEFAULT_MIN_HEIGHT = 50.0
LAMR_REF_RANGE = (-2.0, 0.0)  # log10 FPPI endpoints
LAMR_REF_POINTS = 9
MISS_CLAMP = 1e-10


class NoGroundTruth(ValueError):
    """The evaluation set has no scorable ground-truth boxes."""


class EmptyCurve(ValueError):
    """A log-average was requested for a curve without points."""


@dataclass(frozen=True)
class EvalDet:
    """A scored detection on one image."""

    score: float
    box: BBox


@dataclass(frozen=True)
class EvalGt:
    """A ground-truth box; ignore regions never count against the detector."""

    box: BBox
    ignore: bool = False


@dataclass
class ImageMatch:
    """Index-level matching outcome for one image."""

    tp: list[tuple[int, int]] = field(default_factory=list)  # (det_idx, gt_idx)
    fp: list[int] = field(default_factory=list)              # unmatched det indices
    fn: list[int] = field(default_factory=list)              # unmatched scorable gt indices
    discarded: list[int] = field(default_factory=list)       # dets absorbed by ignore gts


@dataclass
class MatchResult:
    """Per-image matches plus aggregate counts over scorable items."""

    per_image: dict[str, ImageMatch]
    n_tp: int
    n_fp: int
    n_fn: int
    n_gt: int       # scorable (non-ignored) ground truths
    n_images: int


def _effective_ignore(gt: EvalGt, min_height: float) -> bool:
    return gt.ignore or gt.box.h < min_height


def _match_one_image(
    dets: Sequence[EvalDet],
    gts: Sequence[EvalGt],
    iou_thresh: float,
    min_height: float,
) -> ImageMatch:
    ignored = [_effective_ignore(g, min_height) for g in gts]
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    claimed = [False] * len(gts)
    match = ImageMatch()
    for di in order:
        best: Optional[tuple[float, int]] = None
        for gi, gt in enumerate(gts):
            if claimed[gi]:
                continue
            overlap = iou(dets[di].box, gt.box)
            if overlap >= iou_thresh and (best is None or overlap > best[0]):
                best = (overlap, gi)
        if best is None:
            match.fp.append(di)
            continue
        gi = best[1]
        claimed[gi] = True
        if ignored[gi]:
            match.discarded.append(di)
        else:
            match.tp.append((di, gi))
    match.fn = [gi for gi in range(len(gts)) if not ignored[gi] and not claimed[gi]]
    return match


def match_detections(
    dets: Mapping[str, Sequence[EvalDet]],
    gts: Mapping[str, Sequence[EvalGt]],
    iou_thresh: float = DEFAULT_IOU_THRESH,
    min_height: float = DEFAULT_MIN_HEIGHT,
) -> MatchResult:
    """Greedy-match detections to ground truth across a set of images.

    Keys of both mappings are image ids; their union defines the image
    set. Over scorable items, TP + FN = n_gt and TP + FP + discarded =
    n_dets.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    image_ids = sorted(set(dets) | set(gts))
    per_image: dict[str, ImageMatch] = {}
    n_tp = n_fp = n_fn = n_gt = 0
    for image_id in image_ids:
        m = _match_one_image(
            dets.get(image_id, ()), gts.get(image_id, ()), iou_thresh, min_height
        )
        per_image[image_id] = m
        n_tp += len(m.tp)
        n_fp += len(m.fp)
        n_fn += len(m.fn)
        n_gt += sum(
            1 for g in gts.get(image_id, ()) if not _effective_ignore(g, min_height)
        )
    return MatchResult(
        per_image=per_image,
        n_tp=n_tp,
        n_fp=n_fp,
        n_fn=n_fn,
        n_gt=n_gt,
        n_images=len(image_ids),
    )


@dataclass
class EvalCurve:
    """DET curve: (FPPI, miss rate) points plus the log-average summary."""

    points: list[tuple[float, float]]
    lamr: float          # fraction in [0, 1]
    n_images: int
    n_gt: int

    @property
    def lamr_percent(self) -> float:
        return 100.0 * self.lamr


def compute_det_curve(
    dets: Mapping[str, Sequence[EvalDet]],
    gts: Mapping[str, Sequence[EvalGt]],
    iou_thresh: float = DEFAULT_IOU_THRESH,
    min_height: float = DEFAULT_MIN_HEIGHT,
    n_images: Optional[int] = None,
) -> EvalCurve:
    """Sweep the score threshold and collect (FPPI, miss rate) points.

    n_images overrides the image count used for FPPI (it defaults to the
    number of distinct image ids present in either input). Raises
    NoGroundTruth when no scorable gt exists anywhere.
    """
    result = match_detections(dets, gts, iou_thresh=iou_thresh, min_height=min_height)
    if result.n_gt == 0:
        raise NoGroundTruth("evaluation set has no scorable ground-truth boxes")
    if n_images is not None:
        if n_images < result.n_images:
            raise ValueError(
                f"n_images override ({n_images}) is smaller than the "
                f"{result.n_images} images present in the inputs"
            )
        result.n_images = n_images

    # Each detection's outcome at full recall, tagged with its score.
    # Restricting to scores >= t reproduces the greedy match at t.
    tp_scores: list[float] = []
    fp_scores: list[float] = []
    for image_id, m in result.per_image.items():
        image_dets = dets.get(image_id, ())
        tp_scores.extend(image_dets[di].score for di, _ in m.tp)
        fp_scores.extend(image_dets[di].score for di in m.fp)

    thresholds = sorted({*tp_scores, *fp_scores}, reverse=True)
    points: list[tuple[float, float]] = []
    # +inf threshold: nothing detected
    points.append((0.0, 1.0))
    for t in thresholds:
        tp = sum(1 for s in tp_scores if s >= t)
        fp = sum(1 for s in fp_scores if s >= t)
        points.append((fp / result.n_images, (result.n_gt - tp) / result.n_gt))

    # sorted by fppi; for duplicate fppi keep the lowest miss
    dedup: dict[float, float] = {}
    for fppi, miss in points:
        if fppi not in dedup or miss < dedup[fppi]:
            dedup[fppi] = miss
    final = sorted(dedup.items())
    curve = EvalCurve(points=final, lamr=0.0, n_images=result.n_images, n_gt=result.n_gt)
    curve.lamr = log_average_miss_rate(curve) / 100.0
    return curve


def log_average_miss_rate(curve: EvalCurve) -> float:
    """Geometric mean of miss rates at 9 log-spaced FPPI points, as a percent.

    Raises EmptyCurve for a curve without points.
    """
    if not curve.points:
        raise EmptyCurve("curve has no points")
    lo, hi = LAMR_REF_RANGE
    refs = [10.0 ** (lo + (hi - lo) * i / (LAMR_REF_POINTS - 1)) for i in range(LAMR_REF_POINTS)]
    log_sum = 0.0
    for ref in refs:
        miss = curve.points[0][1]
        for fppi, m in curve.points:
            if fppi <= ref:
                miss = m
            else:
                break
        log_sum += math.log(max(miss, MISS_CLAMP))
    return 100.0 * math.exp(log_sum / LAMR_REF_POINTS)


def load_eval_boxes(
    path: str | Path,
    kind: str,
    person_only: bool = True,
) -> dict[str, list]:
    """Read detection ("det") or ground-truth ("gt") JSONL rows per image.

    Rows use the detector file contract; gt rows may omit score and may
    carry ``ignore: true``. Rows labeled other than "person" are skipped
    when person_only is set (a missing label counts as person).
    """
    out: dict[str, list] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON: {exc.msg}")
            label = obj.get("label", "person")
            if person_only and label != "person":
                continue
            image_id = str(obj.get("image_id"))
            raw_box = obj.get("box")
            if not isinstance(raw_box, (list, tuple)) or len(raw_box) != 4:
                raise ParseError(line_no, f"box must be [x, y, w, h], got {raw_box!r}")
            box = BBox(*(float(v) for v in raw_box))
            if kind == "det":
                try:
                    score = float(obj["score"])
                except (KeyError, TypeError, ValueError):
                    raise ParseError(line_no, "detection rows need a numeric score")
                out.setdefault(image_id, []).append(EvalDet(score=score, box=box))
            elif kind == "gt":
                out.setdefault(image_id, []).append(
                    EvalGt(box=box, ignore=bool(obj.get("ignore", False)))
                )
            else:
                raise ValueError(f"kind must be 'det' or 'gt', got {kind!r}")
    return out


def write_curve_csv(curve: EvalCurve, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fppi", "miss_rate"])
        for fppi, miss in curve.points:
            writer.writerow([repr(fppi), repr(miss)])


def write_curve_summary(curve: EvalCurve, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "lamr_percent": curve.lamr_percent,
                "n_images": curve.n_images,
                "n_gt": curve.n_gt,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
