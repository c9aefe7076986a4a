"""personforge: weakly supervised person-detection dataset tooling.

Builds person datasets from geo-tagged photo corpora and external
detector output: city-based corpus filtering, score-threshold
selection, linear-SVM crop refinement, COCO-style emission, human
quality audits, annotation-noise studies, and miss-rate evaluation.
"""

__version__ = "0.1.0"

from .geometry import BBox, boxes_disjoint, clamp_to_image, crop_region, iou

__all__ = [
    "BBox",
    "boxes_disjoint",
    "clamp_to_image",
    "crop_region",
    "iou",
    "__version__",
]
