"""Axis-aligned box arithmetic: IoU, union boxes, and union-frame grid coordinates."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with corners (x1, y1) and (x2, y2), x1 < x2 and y1 < y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def is_valid(self) -> bool:
        return self.x1 < self.x2 and self.y1 < self.y2

    def translated(self, dx: float, dy: float) -> "Box":
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


@dataclass(frozen=True)
class UnionBox:
    """Minimal enclosing box of a human/object pair, keeping track of its sources."""

    box: Box
    source_human: Box
    source_object: Box


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area; 0.0 for disjoint boxes."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def union_box(h: Box, o: Box) -> UnionBox:
    """Minimal axis-aligned box containing both boxes."""
    return UnionBox(
        box=Box(min(h.x1, o.x1), min(h.y1, o.y1), max(h.x2, o.x2), max(h.y2, o.y2)),
        source_human=h,
        source_object=o,
    )


def _round_half_away(value: float) -> int:
    if value >= 0.0:
        return int(math.floor(value + 0.5))
    return -int(math.floor(-value + 0.5))


def normalize_to_union(b: Box, u: UnionBox, grid: int) -> tuple[int, int, int, int]:
    """Map a box into the ``grid`` x ``grid`` frame spanned by the union box.

    The x and y axes are scaled independently (the frame does not preserve the
    union box aspect ratio). Returns inclusive cell indices
    ``(cx1, cy1, cx2, cy2)`` in ``[0, grid)``; continuous coordinates are
    clipped to the frame and rounded half-away-from-zero. A box narrower than
    one cell after scaling still occupies one full cell.

    Raises ``ValueError`` if ``b`` does not intersect the union frame or the
    grid is smaller than 2.
    """
    if grid < 2:
        raise ValueError(f"grid must be >= 2, got {grid}")
    frame = u.box
    if b.x1 >= frame.x2 or b.x2 <= frame.x1 or b.y1 >= frame.y2 or b.y2 <= frame.y1:
        raise ValueError("box outside union frame")
    sx = grid / frame.width
    sy = grid / frame.height
    fx1 = min(max((b.x1 - frame.x1) * sx, 0.0), float(grid))
    fy1 = min(max((b.y1 - frame.y1) * sy, 0.0), float(grid))
    fx2 = min(max((b.x2 - frame.x1) * sx, 0.0), float(grid))
    fy2 = min(max((b.y2 - frame.y1) * sy, 0.0), float(grid))
    cx1 = min(max(_round_half_away(fx1), 0), grid - 1)
    cy1 = min(max(_round_half_away(fy1), 0), grid - 1)
    cx2 = min(max(_round_half_away(fx2) - 1, 0), grid - 1)
    cy2 = min(max(_round_half_away(fy2) - 1, 0), grid - 1)
    # thin boxes keep at least one cell so rasterized channels never go empty
    if cx2 < cx1:
        cx2 = cx1
    if cy2 < cy1:
        cy2 = cy1
    return cx1, cy1, cx2, cy2
