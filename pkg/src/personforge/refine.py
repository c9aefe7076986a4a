"""Crop refinement: a binary linear classifier over crop features.

The refinement stage keeps whole-body person crops and discards partial
bodies and background. A crop is embedded as a fixed-length feature
vector, scored by a linear model (w . f + b), and accepted exactly when
the margin is >= 0.

Feature vectors are plain 1-D numpy arrays. The neural embedding the
refinement was designed around stays out of process: precomputed
features arrive through a JSONL file keyed by box_id, and a
deterministic built-in extractor covers tests and offline runs.

Training uses the Pegasos scheme: L2-regularized hinge loss minimized
by stochastic subgradient descent with step size 1/(lambda*t), full
shuffled passes with a seeded shuffle, so two runs with the same inputs
and seed produce bit-identical weights.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .corpus import ImageRecord
from .detect import PROV_REFINED, PersonBox
from .geometry import BBox, crop_region, iou

FEATURE_DIM = 96

DEFAULT_LAMBDA = 1e-4
DEFAULT_EPOCHS = 20
DEFAULT_SEED = 42

_GRAY_GRID = 8           # 8x8 mean-gray cells -> 64 values
_N_ORIENTATIONS = 8      # orientation bins over [0, 2*pi)
_SPATIAL_CELLS = 2       # 2x2 spatial layout for the gradient histogram


class EmptyPatch(ValueError):
    """Feature extraction was asked for a zero-size patch."""


class EmptyClass(ValueError):
    """SVM training requires at least one sample per class."""


class DimMismatch(ValueError):
    """Feature dimensionality differs from what the model expects."""


class MissingFeature(KeyError):
    """The external feature file has no row for a box_id."""

    def __init__(self, box_id: str):
        super().__init__(box_id)
        self.box_id = box_id

    def __str__(self) -> str:
        return f"no feature row for box {self.box_id!r}"


class RefinementLabel(enum.Enum):
    """The two refinement outcomes: accepted person vs rejected background."""

    PERSON = "person"
    BACKGROUND = "background"


@dataclass(frozen=True)
class LinearModel:
    """Linear classifier: margin = w . f + b."""

    w: np.ndarray
    b: float
    training_meta: dict

    @property
    def dim(self) -> int:
        return int(self.w.shape[0])

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "w": [float(v) for v in self.w],
            "b": float(self.b),
            "training_meta": self.training_meta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LinearModel":
        w = np.asarray(obj["w"], dtype=np.float64)
        if int(obj.get("dim", w.shape[0])) != w.shape[0]:
            raise ValueError("model dim does not match weight length")
        return cls(w=w, b=float(obj["b"]), training_meta=dict(obj.get("training_meta", {})))


def save_model(model: LinearModel, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path: str | Path) -> LinearModel:
    with open(path, encoding="utf-8") as fh:
        return LinearModel.from_json(json.load(fh))


def _to_gray(patch: np.ndarray) -> np.ndarray:
    arr = np.asarray(patch)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    elif arr.ndim != 2:
        raise ValueError(f"patch must be 2-D or 3-D, got shape {arr.shape}")
    arr = arr.astype(np.float64)
    if np.issubdtype(np.asarray(patch).dtype, np.integer):
        arr /= 255.0
    return arr


def _area_average_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix averaging input pixels into n_out equal intervals.

    Row i holds each pixel's overlap with [i*n_in/n_out, (i+1)*n_in/n_out],
    normalized by the interval length, so fractional pixel coverage is
    weighted exactly.
    """
    weights = np.zeros((n_out, n_in))
    step = n_in / n_out
    for i in range(n_out):
        lo = i * step
        hi = (i + 1) * step
        for p in range(int(np.floor(lo)), min(n_in, int(np.ceil(hi)))):
            overlap = min(hi, p + 1) - max(lo, p)
            if overlap > 0:
                weights[i, p] = overlap / step
    return weights


def builtin_features(patch: np.ndarray) -> np.ndarray:
    """Deterministic 96-dim embedding of a pixel patch.

    64 mean-gray values on an 8x8 grid (area-averaged resize) followed
    by 32 gradient-orientation histogram bins (8 orientations x 2x2
    spatial cells, central-difference gradients, magnitude-weighted),
    L2-normalized as a whole. A patch with zero total energy returns
    the all-zero vector unnormalized.
    """
    arr = np.asarray(patch)
    if arr.size == 0 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise EmptyPatch(f"cannot embed a patch of shape {arr.shape}")
    gray = _to_gray(arr)
    h, w = gray.shape

    rows = _area_average_weights(h, _GRAY_GRID)
    cols = _area_average_weights(w, _GRAY_GRID)
    cells = rows @ gray @ cols.T  # (8, 8)

    # np.gradient: central differences in the interior, one-sided at borders
    if h > 1 and w > 1:
        gy, gx = np.gradient(gray)
    elif h > 1:
        gy = np.gradient(gray, axis=0)
        gx = np.zeros_like(gray)
    elif w > 1:
        gy = np.zeros_like(gray)
        gx = np.gradient(gray, axis=1)
    else:
        gy = np.zeros_like(gray)
        gx = np.zeros_like(gray)
    magnitude = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
    obin = np.minimum((theta / (2.0 * np.pi / _N_ORIENTATIONS)).astype(int), _N_ORIENTATIONS - 1)

    row_idx = np.arange(h)[:, None] * _SPATIAL_CELLS // h  # 0 or 1
    col_idx = np.arange(w)[None, :] * _SPATIAL_CELLS // w
    cell_idx = np.broadcast_to(row_idx * _SPATIAL_CELLS + col_idx, gray.shape)

    hist = np.zeros(_SPATIAL_CELLS * _SPATIAL_CELLS * _N_ORIENTATIONS)
    np.add.at(hist, (cell_idx * _N_ORIENTATIONS + obin).ravel(), magnitude.ravel())

    vec = np.concatenate([cells.ravel(), hist])
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        return vec
    return vec / norm


def _as_matrix(vectors: Sequence[np.ndarray], name: str) -> np.ndarray:
    if len(vectors) == 0:
        raise EmptyClass(f"{name} class is empty")
    mat = np.asarray(vectors, dtype=np.float64)
    if mat.ndim != 2:
        raise DimMismatch(f"{name} vectors do not share one dimensionality")
    if not np.all(np.isfinite(mat)):
        raise ValueError(f"{name} vectors contain non-finite entries")
    return mat


def train_svm(
    pos: Sequence[np.ndarray],
    neg: Sequence[np.ndarray],
    lam: float = DEFAULT_LAMBDA,
    epochs: int = DEFAULT_EPOCHS,
    seed: int = DEFAULT_SEED,
) -> LinearModel:
    """Fit the refinement classifier with Pegasos stochastic subgradient descent.

    Positives are labeled +1 (the accepted-person side), negatives -1.
    Step t uses learning rate 1/(lam*t) with t counting steps globally
    across epochs; each epoch visits all samples once in a seeded
    shuffled order. The bias is updated on margin violations but not
    regularized. Deterministic: fixed (pos, neg, lam, epochs, seed)
    reproduce bit-identical weights.
    """
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    pos_m = _as_matrix(pos, "positive")
    neg_m = _as_matrix(neg, "negative")
    if pos_m.shape[1] != neg_m.shape[1]:
        raise DimMismatch(
            f"positive dim {pos_m.shape[1]} != negative dim {neg_m.shape[1]}"
        )
    x = np.vstack([pos_m, neg_m])
    y = np.concatenate([np.ones(len(pos_m)), -np.ones(len(neg_m))])

    rng = np.random.default_rng(seed)
    w = np.zeros(x.shape[1])
    b = 0.0
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(len(x)):
            t += 1
            eta = 1.0 / (lam * t)
            xi, yi = x[i], y[i]
            if yi * (w @ xi + b) < 1.0:
                w = (1.0 - eta * lam) * w + (eta * yi) * xi
                b += eta * yi
            else:
                w = (1.0 - eta * lam) * w
    return LinearModel(
        w=w,
        b=b,
        training_meta={"lambda": lam, "epochs": epochs, "seed": seed,
                       "n_pos": len(pos_m), "n_neg": len(neg_m)},
    )


def hinge_objective(model: LinearModel, pos: Sequence[np.ndarray], neg: Sequence[np.ndarray], lam: float) -> float:
    """Regularized hinge objective: (lam/2)*||w||^2 + mean hinge loss."""
    pos_m = _as_matrix(pos, "positive")
    neg_m = _as_matrix(neg, "negative")
    x = np.vstack([pos_m, neg_m])
    y = np.concatenate([np.ones(len(pos_m)), -np.ones(len(neg_m))])
    margins = y * (x @ model.w + model.b)
    return 0.5 * lam * float(model.w @ model.w) + float(np.maximum(0.0, 1.0 - margins).mean())


def score(model: LinearModel, feature: np.ndarray) -> float:
    """Margin of one feature vector: w . f + b."""
    f = np.asarray(feature, dtype=np.float64)
    if f.ndim != 1 or f.shape[0] != model.dim:
        raise DimMismatch(f"feature dim {f.shape} does not match model dim {model.dim}")
    return float(model.w @ f + model.b)


def classify(model: LinearModel, feature: np.ndarray) -> RefinementLabel:
    """PERSON iff the margin is >= 0 (boundary inclusive), else BACKGROUND."""
    return RefinementLabel.PERSON if score(model, feature) >= 0.0 else RefinementLabel.BACKGROUND


class FeatureSource:
    """Resolves a PersonBox to its feature vector."""

    def features_for(self, box: PersonBox) -> np.ndarray:
        raise NotImplementedError


class BuiltinFeatureSource(FeatureSource):
    """Crops the box from its image and embeds it with builtin_features.

    `load_pixels` maps an image_id to its pixel array; the most recent
    image is cached since boxes usually arrive grouped by image.
    """

    def __init__(self, load_pixels: Callable[[str], np.ndarray]):
        self._load_pixels = load_pixels
        self._cached_id: Optional[str] = None
        self._cached_pixels: Optional[np.ndarray] = None

    def features_for(self, box: PersonBox) -> np.ndarray:
        if box.image_id != self._cached_id:
            self._cached_pixels = self._load_pixels(box.image_id)
            self._cached_id = box.image_id
        return builtin_features(crop_region(self._cached_pixels, box.box))


class FileFeatureSource(FeatureSource):
    """Precomputed features from a JSONL file of {box_id, values} rows."""

    def __init__(self, table: Mapping[str, np.ndarray]):
        self._table = table

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "FileFeatureSource":
        return cls(load_feature_file(path))

    def features_for(self, box: PersonBox) -> np.ndarray:
        try:
            return self._table[box.box_id]
        except KeyError:
            raise MissingFeature(box.box_id)


def load_feature_file(path: str | Path) -> dict[str, np.ndarray]:
    """Read a {box_id, values} JSONL feature file, preserving row order."""
    table: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            table[str(obj["box_id"])] = np.asarray(obj["values"], dtype=np.float64)
    return table


def write_feature_file(path: str | Path, rows: Iterable[tuple[str, np.ndarray]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for box_id, values in rows:
            fh.write(json.dumps({"box_id": box_id, "values": [float(v) for v in values]}))
            fh.write("\n")


@dataclass
class RefinementReport:
    """Counts of the keep/drop decision across one refinement pass."""

    n_in: int
    n_kept: int
    n_dropped: int
    kept_ratio: Optional[float]
    images_emptied: list[str]

    def to_json(self) -> dict:
        return {
            "n_in": self.n_in,
            "n_kept": self.n_kept,
            "n_dropped": self.n_dropped,
            "kept_ratio": self.kept_ratio,
            "images_emptied": self.images_emptied,
        }


def refine_dataset(
    boxes: Sequence[PersonBox],
    model: LinearModel,
    features: FeatureSource,
    workers: int = 1,
) -> tuple[list[PersonBox], RefinementReport]:
    """Keep exactly the boxes the classifier accepts.

    Kept boxes get provenance "refined". The report flags images whose
    boxes were all dropped so emission can omit them. Classification is
    pure per box; with workers > 1 the feature+classify step runs in a
    thread pool with order-preserving results.
    """
    decisions: list[RefinementLabel]
    if workers > 1 and len(boxes) > 1:
        from concurrent.futures import ThreadPoolExecutor

        def decide(box: PersonBox) -> RefinementLabel:
            return classify(model, features.features_for(box))

        with ThreadPoolExecutor(max_workers=workers) as pool:
            decisions = list(pool.map(decide, boxes))
    else:
        decisions = [classify(model, features.features_for(box)) for box in boxes]

    kept = [
        replace(box, provenance=PROV_REFINED)
        for box, label in zip(boxes, decisions)
        if label is RefinementLabel.PERSON
    ]
    images_in = {b.image_id for b in boxes}
    images_kept = {b.image_id for b in kept}
    report = RefinementReport(
        n_in=len(boxes),
        n_kept=len(kept),
        n_dropped=len(boxes) - len(kept),
        kept_ratio=(len(kept) / len(boxes)) if boxes else None,
        images_emptied=sorted(images_in - images_kept),
    )
    return kept, report


def generate_negative_crops(
    images: Sequence[ImageRecord],
    person_boxes: Mapping[str, Sequence[BBox]],
    n: int,
    seed: int,
    iou_max: float = 0.1,
    min_h_frac: float = 0.1,
    max_h_frac: float = 0.6,
    max_tries: int = 100,
) -> list[tuple[str, BBox]]:
    """Sample random square crops that barely overlap any person box.

    Each crop's side is uniform in [min_h_frac, max_h_frac] of the image
    height; a candidate is accepted when its IoU with every person box
    on that image stays below iou_max. Seeded and deterministic.
    """
    if not images:
        return []
    rng = np.random.default_rng(seed)
    crops: list[tuple[str, BBox]] = []
    attempts = 0
    max_attempts = max_tries * max(n, 1)
    while len(crops) < n and attempts < max_attempts:
        attempts += 1
        rec = images[int(rng.integers(len(images)))]
        side = float(rng.uniform(min_h_frac, max_h_frac)) * rec.height
        side = min(side, float(rec.width), float(rec.height))
        if side <= 1.0:
            continue
        x = float(rng.uniform(0.0, rec.width - side))
        y = float(rng.uniform(0.0, rec.height - side))
        candidate = BBox(x, y, side, side)
        persons = person_boxes.get(rec.image_id, ())
        if all(iou(candidate, p) < iou_max for p in persons):
            crops.append((rec.image_id, candidate))
    return crops
