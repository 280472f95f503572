"""Axis-aligned box arithmetic in continuous pixel coordinates.

Boxes use the corner convention (x_min, y_min, x_max, y_max) and stay
floating-point end to end; integerization happens only where pixels are
actually sampled (crops, rendering). Edge-touching boxes have IoU 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ._native import pairwise_iou as _pairwise_iou


class GeometryError(ValueError):
    """Raised for invalid boxes or image sizes."""


@dataclass(frozen=True, slots=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(isinstance(c, (int, float)) and math.isfinite(c) for c in coords):
            raise GeometryError(f"box coordinates must be finite numbers: {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(
                f"box must have positive area (x_min < x_max, y_min < y_max): {coords}"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True, slots=True)
class ImageSize:
    width: int
    height: int

    def __post_init__(self):
        if not (isinstance(self.width, int) and isinstance(self.height, int)):
            raise GeometryError(f"image size must be integer pixels: {self.width}x{self.height}")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"image size must be positive: {self.width}x{self.height}")

    def as_tuple(self) -> tuple[int, int]:
        return (self.width, self.height)


def area(box: BoundingBox) -> float:
    """Box area; positive by construction."""
    return box.width * box.height


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union in [0, 1]; 0 for disjoint or edge-touching boxes."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    if iw <= 0.0:
        return 0.0
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / ((area(a) + area(b)) - inter)


def clip(box: BoundingBox, size: ImageSize) -> BoundingBox | None:
    """Intersect a box with the image rectangle; None when nothing remains."""
    x0 = max(box.x_min, 0.0)
    y0 = max(box.y_min, 0.0)
    x1 = min(box.x_max, float(size.width))
    y1 = min(box.y_max, float(size.height))
    if x0 >= x1 or y0 >= y1:
        return None
    return BoundingBox(x0, y0, x1, y1)


def rescale(box: BoundingBox, src: ImageSize, dst: ImageSize) -> BoundingBox:
    """Map a box between image resolutions by independent axis scaling."""
    if src == dst:
        return box
    sx = dst.width / src.width
    sy = dst.height / src.height
    return BoundingBox(box.x_min * sx, box.y_min * sy, box.x_max * sx, box.y_max * sy)


def boxes_to_array(boxes: Iterable[BoundingBox]) -> np.ndarray:
    """Stack boxes into an (n, 4) float64 array for the kernels."""
    rows = [b.as_tuple() for b in boxes]
    if not rows:
        return np.empty((0, 4), dtype=np.float64)
    return np.asarray(rows, dtype=np.float64)


def pairwise_iou(a: Sequence[BoundingBox] | np.ndarray,
                 b: Sequence[BoundingBox] | np.ndarray) -> np.ndarray:
    """IoU matrix between two box collections (kernel-backed)."""
    arr_a = a if isinstance(a, np.ndarray) else boxes_to_array(a)
    arr_b = b if isinstance(b, np.ndarray) else boxes_to_array(b)
    return _pairwise_iou(arr_a, arr_b)
