"""Axis-aligned boxes, class tags and overlap measures.

Coordinates are continuous pixel positions in the 512x512 slice frame.  Slice
bounds of 3D boxes are inclusive, so a box covering slices 3..4 is two slices
thick.

Every threshold comparison in the package goes through :func:`at_least` or
:func:`exceeds` so the inclusive/strict choice lives in one place.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from lesionforge import _kernels

# Guards against 0.3 - 1e-17 style misses when an overlap is computed as
# exactly the threshold in decimal but not in binary.
COMPARE_EPS = 1e-12


def at_least(value: float, threshold: float) -> bool:
    """Inclusive threshold test used for linking, matching and mining."""
    return value >= threshold - COMPARE_EPS


def exceeds(value: float, threshold: float) -> bool:
    """Strict threshold test; only tag mapping uses it."""
    return value > threshold + COMPARE_EPS


class ClassLabel(str, enum.Enum):
    BONE = "bone"
    ABDOMEN = "abdomen"
    MEDIASTINUM = "mediastinum"
    LIVER = "liver"
    LUNG = "lung"
    KIDNEY = "kidney"
    SOFT_TISSUE = "soft_tissue"
    PELVIS = "pelvis"

    def __str__(self) -> str:
        return self.value

    @property
    def index(self) -> int:
        return _LABEL_INDEX[self]

    @classmethod
    def parse(cls, text: str) -> "ClassLabel":
        key = text.strip().lower().replace(" ", "_")
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown class tag {text!r}") from None


CLASSES: tuple[ClassLabel, ...] = tuple(ClassLabel)
_LABEL_INDEX = {c: i for i, c in enumerate(CLASSES)}


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite coordinate {v!r}")


@dataclass(frozen=True, order=True)
class Box2D:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        _check_finite(self.x1, self.y1, self.x2, self.y2)
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self.as_tuple()}")
        if min(self.x1, self.y1) < 0:
            raise ValueError(f"negative coordinate in {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def shifted(self, dx: float, dy: float) -> "Box2D":
        return Box2D(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


@dataclass(frozen=True, order=True)
class Box3D:
    x1: float
    y1: float
    x2: float
    y2: float
    z1: int
    z2: int

    def __post_init__(self) -> None:
        _check_finite(self.x1, self.y1, self.x2, self.y2)
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self.as_tuple()}")
        if min(self.x1, self.y1) < 0 or self.z1 < 0:
            raise ValueError(f"negative coordinate in {self.as_tuple()}")
        if int(self.z1) != self.z1 or int(self.z2) != self.z2:
            raise ValueError("slice bounds must be integers")
        if self.z1 > self.z2:
            raise ValueError(f"empty slice range [{self.z1}, {self.z2}]")

    def as_tuple(self) -> tuple[float, float, float, float, int, int]:
        return (self.x1, self.y1, self.x2, self.y2, self.z1, self.z2)

    @property
    def footprint(self) -> Box2D:
        return Box2D(self.x1, self.y1, self.x2, self.y2)

    @property
    def depth(self) -> int:
        return self.z2 - self.z1 + 1

    def contains_slice(self, z: int) -> bool:
        return self.z1 <= z <= self.z2


@dataclass(frozen=True)
class ScoredBox2D:
    """One per-slice detection (or annotation) with its confidence and tag.

    ``volume_id`` is optional; stacking uses it to refuse mixed-volume input.
    """

    box: Box2D
    slice_index: int
    score: float
    tag: Optional[ClassLabel]
    volume_id: Optional[str] = None

    def __post_init__(self) -> None:
        if self.slice_index < 0:
            raise ValueError(f"negative slice index {self.slice_index}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")

    def sort_key(self) -> tuple:
        """Score descending, then coordinates, then tag; a total order."""
        return (-self.score, self.box.as_tuple(), self.tag.value if self.tag else "")


# --------------------------------------------------------------------------
# scalar measures
# --------------------------------------------------------------------------


def area(b: Box2D) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def volume(b: Box3D) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1) * (b.z2 - b.z1 + 1.0)


def _intersection_2d(a, b) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    return iw * ih


def _intersection_3d(a: Box3D, b: Box3D) -> float:
    idz = max(0.0, min(a.z2, b.z2) - max(a.z1, b.z1) + 1.0)
    return _intersection_2d(a, b) * idz


def iou_2d(a: Box2D, b: Box2D) -> float:
    inter = _intersection_2d(a, b)
    return inter / (area(a) + area(b) - inter)


def iobb_2d(pred: Box2D, gt: Box2D) -> float:
    """Intersection over the predicted box's area (not symmetric)."""
    return _intersection_2d(pred, gt) / area(pred)


def iou_3d(a: Box3D, b: Box3D) -> float:
    inter = _intersection_3d(a, b)
    return inter / (volume(a) + volume(b) - inter)


def iobb_3d(pred: Box3D, gt: Box3D) -> float:
    return _intersection_3d(pred, gt) / volume(pred)


OVERLAP_3D = {"iou": iou_3d, "iobb": iobb_3d}


def overlap_3d(pred: Box3D, gt: Box3D, measure: str = "iobb") -> float:
    try:
        return OVERLAP_3D[measure](pred, gt)
    except KeyError:
        raise ValueError(f"unknown overlap measure {measure!r}") from None


# --------------------------------------------------------------------------
# batched measures (compiled kernels)
# --------------------------------------------------------------------------


def boxes_to_array(boxes: Sequence[Box2D | Box3D], width: int = 4) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, width))
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def pairwise_iou_2d(a, b) -> np.ndarray:
    return _kernels.overlap_2d(a, b, _kernels.IOU)


def pairwise_iobb_2d(pred, gt) -> np.ndarray:
    return _kernels.overlap_2d(pred, gt, _kernels.IOBB)


def pairwise_iou_3d(a, b) -> np.ndarray:
    return _kernels.overlap_3d(a, b, _kernels.IOU)


def pairwise_iobb_3d(pred, gt) -> np.ndarray:
    return _kernels.overlap_3d(pred, gt, _kernels.IOBB)


def pairwise_overlap_3d(pred, gt, measure: str = "iobb") -> np.ndarray:
    if measure == "iobb":
        return pairwise_iobb_3d(pred, gt)
    if measure == "iou":
        return pairwise_iou_3d(pred, gt)
    raise ValueError(f"unknown overlap measure {measure!r}")
