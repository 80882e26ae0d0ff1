"""Bounding-box arithmetic, IoU and the 11-way spatial relation between two boxes."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

# Normalized centre distance (fraction of the frame diagonal) above which disjoint boxes are "far".
FAR_THRESHOLD = 0.5


@dataclass(frozen=True)
class ImageFrame:
    """Image extent in pixels."""

    width: float
    height: float

    def __post_init__(self) -> None:
        for name in ('width', 'height'):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise ValueError(f'frame {name} must be finite and > 0, got {value!r}')

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, origin top-left, y growing downwards."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f'box coordinates must be finite: {coords}')
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f'box must have positive area: {coords}')

    @classmethod
    def from_list(cls, values: Sequence[float]) -> BoundingBox:
        if len(values) != 4:
            raise ValueError(f'box needs 4 coordinates, got {len(values)}')
        x0, y0, x1, y1 = (float(v) for v in values)
        return cls(x0, y0, x1, y1)

    def to_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def contains(self, other: BoundingBox) -> bool:
        """Closed containment: touching edges still count."""
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and self.x_max >= other.x_max
            and self.y_max >= other.y_max
        )

    @classmethod
    def clipped(cls, coords: Sequence[float], frame: ImageFrame) -> BoundingBox | None:
        """Box from raw [x_min, y_min, x_max, y_max] clipped to the frame; None when no area is left."""
        x0 = min(max(coords[0], 0.0), frame.width)
        y0 = min(max(coords[1], 0.0), frame.height)
        x1 = min(max(coords[2], 0.0), frame.width)
        y1 = min(max(coords[3], 0.0), frame.height)
        if x0 >= x1 or y0 >= y1:
            return None
        return cls(x0, y0, x1, y1)

    def translated(self, dx: float, dy: float) -> BoundingBox:
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)


class SpatialRelation(IntEnum):
    """Layout of a reference box as seen from a subject box. Values index the relation axis of tensors."""

    FAR_APART = 0
    DISJOINT_ABOVE = 1
    DISJOINT_BELOW = 2
    DISJOINT_LEFT = 3
    DISJOINT_RIGHT = 4
    INSIDE = 5
    OUTSIDE = 6
    OVERLAP_ABOVE = 7
    OVERLAP_BELOW = 8
    OVERLAP_LEFT = 9
    OVERLAP_RIGHT = 10

    @property
    def label(self) -> str:
        """Wire name, e.g. 'disjoint-above'."""
        return self.name.lower().replace('_', '-')

    @classmethod
    def from_label(cls, text: str) -> SpatialRelation:
        key = text.strip().upper().replace('-', '_')
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f'Unknown spatial relation: {text!r}') from None


NUM_RELATIONS = len(SpatialRelation)

_INVERSE = {
    SpatialRelation.FAR_APART: SpatialRelation.FAR_APART,
    SpatialRelation.DISJOINT_ABOVE: SpatialRelation.DISJOINT_BELOW,
    SpatialRelation.DISJOINT_BELOW: SpatialRelation.DISJOINT_ABOVE,
    SpatialRelation.DISJOINT_LEFT: SpatialRelation.DISJOINT_RIGHT,
    SpatialRelation.DISJOINT_RIGHT: SpatialRelation.DISJOINT_LEFT,
    SpatialRelation.INSIDE: SpatialRelation.OUTSIDE,
    SpatialRelation.OUTSIDE: SpatialRelation.INSIDE,
    SpatialRelation.OVERLAP_ABOVE: SpatialRelation.OVERLAP_BELOW,
    SpatialRelation.OVERLAP_BELOW: SpatialRelation.OVERLAP_ABOVE,
    SpatialRelation.OVERLAP_LEFT: SpatialRelation.OVERLAP_RIGHT,
    SpatialRelation.OVERLAP_RIGHT: SpatialRelation.OVERLAP_LEFT,
}

# inverse_relation as an index permutation over the relation axis
INVERSE_INDEX = np.array([_INVERSE[r] for r in SpatialRelation], dtype=np.intp)

# Coincident centres with partial overlap carry no direction.
COINCIDENT_CENTER_RELATION = SpatialRelation.OVERLAP_ABOVE


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def _direction(dx: float, dy: float) -> str:
    """
    Sector of the displacement (dx, dy) with image-down = +y, using half-open
    90 degree sectors centred on the axes: right (-45, 45], below (45, 135],
    left (135, 225], above (225, 315]. Comparisons are exact so negating the
    displacement always lands in the opposite sector.
    """
    if dx > 0 and -dx < dy <= dx:
        return 'right'
    if dy > 0 and -dy <= dx < dy:
        return 'below'
    if dx < 0 and dx <= dy < -dx:
        return 'left'
    return 'above'


_DISJOINT = {
    'above': SpatialRelation.DISJOINT_ABOVE,
    'below': SpatialRelation.DISJOINT_BELOW,
    'left': SpatialRelation.DISJOINT_LEFT,
    'right': SpatialRelation.DISJOINT_RIGHT,
}
_OVERLAP = {
    'above': SpatialRelation.OVERLAP_ABOVE,
    'below': SpatialRelation.OVERLAP_BELOW,
    'left': SpatialRelation.OVERLAP_LEFT,
    'right': SpatialRelation.OVERLAP_RIGHT,
}


def classify_relation(subject: BoundingBox, reference: BoundingBox, frame: ImageFrame) -> SpatialRelation:
    """Where `reference` lies relative to `subject`."""
    sx, sy = subject.center
    rx, ry = reference.center
    dx = rx - sx
    dy = ry - sy
    if intersection_area(subject, reference) == 0.0:
        if math.hypot(dx, dy) / frame.diagonal > FAR_THRESHOLD:
            return SpatialRelation.FAR_APART
        return _DISJOINT[_direction(dx, dy)]
    if subject.contains(reference):
        return SpatialRelation.OUTSIDE
    if reference.contains(subject):
        return SpatialRelation.INSIDE
    if dx == 0 and dy == 0:
        return COINCIDENT_CENTER_RELATION
    return _OVERLAP[_direction(dx, dy)]


def inverse_relation(r: SpatialRelation) -> SpatialRelation:
    """The relation seen with subject and reference swapped."""
    return _INVERSE[SpatialRelation(r)]


def relation_matrix(boxes: Sequence[BoundingBox], frame: ImageFrame) -> np.ndarray:
    """
    N x N relation cache. For i < j entry [i, j] is classify_relation(box_i, box_j)
    and entry [j, i] its inverse, so the matrix is consistent under role swap even
    for identical boxes. The diagonal is FAR_APART and never read.
    """
    n = len(boxes)
    out = np.zeros((n, n), dtype=np.intp)
    for i in range(n):
        for j in range(i + 1, n):
            r = classify_relation(boxes[i], boxes[j], frame)
            out[i, j] = r
            out[j, i] = INVERSE_INDEX[r]
    return out
