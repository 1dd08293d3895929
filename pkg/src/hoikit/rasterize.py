"""Union-frame map rasterization feeding the spatial and spatial-pose streams.

All maps live on a square grid (64 by default) spanned by the human-object
union box. Instance channels are binary masks of the normalized boxes; the
pose channel draws skeleton limbs as one-cell-wide lines whose gray values
encode the body part.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .geometry import Box, UnionBox, normalize_to_union

if TYPE_CHECKING:  # pragma: no cover
    from .scene import Keypoint

DEFAULT_GRID = 64

# Limb list for 17-keypoint annotations (nose, eyes, ears, shoulders, elbows,
# wrists, hips, knees, ankles). Order is fixed: later limbs overwrite earlier
# ones where lines cross, and the gray values below are assigned in this order.
COCO_SKELETON: tuple[tuple[int, int], ...] = (
    (15, 13),  # left ankle - left knee
    (13, 11),  # left knee - left hip
    (16, 14),  # right ankle - right knee
    (14, 12),  # right knee - right hip
    (11, 12),  # hips
    (5, 11),   # left shoulder - left hip
    (6, 12),   # right shoulder - right hip
    (5, 6),    # shoulders
    (5, 7),    # left shoulder - left elbow
    (6, 8),    # right shoulder - right elbow
    (7, 9),    # left elbow - left wrist
    (8, 10),   # right elbow - right wrist
    (1, 2),    # eyes
    (0, 1),    # nose - left eye
    (0, 2),    # nose - right eye
    (1, 3),    # left eye - left ear
    (2, 4),    # right eye - right ear
    (3, 5),    # left ear - left shoulder
    (4, 6),    # right ear - right shoulder
)

GRAY_LOW = 0.15
GRAY_HIGH = 0.95


def limb_gray_values(n_limbs: int = len(COCO_SKELETON)) -> np.ndarray:
    """Evenly spaced gray values over the documented limb order."""
    return np.linspace(GRAY_LOW, GRAY_HIGH, n_limbs)


@dataclass(frozen=True, eq=False)
class MapTensor:
    """A channels-first stack of union-frame maps."""

    values: np.ndarray

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def grid(self) -> int:
        return self.values.shape[1]

    def violations(self) -> list[str]:
        """Invariant breaches: binary instance channels, gray-ranged pose channel."""
        out = []
        if self.values.ndim != 3 or self.values.shape[1] != self.values.shape[2]:
            out.append("values must be a channels x grid x grid stack")
            return out
        if self.channels not in (2, 3):
            out.append(f"expected 2 or 3 channels, got {self.channels}")
        instance = self.values[-2:]
        if not np.isin(instance, (0.0, 1.0)).all():
            out.append("instance channels must contain only 0 and 1")
        if self.channels == 3:
            pose = self.values[0]
            nonzero = pose[pose != 0.0]
            if nonzero.size and (nonzero.min() < GRAY_LOW or nonzero.max() > GRAY_HIGH):
                out.append(
                    f"pose channel values must lie in {{0}} or [{GRAY_LOW}, {GRAY_HIGH}]"
                )
        return out


def rasterize_instance_map(b: Box, u: UnionBox, grid: int = DEFAULT_GRID) -> np.ndarray:
    """Binary mask of ``b`` inside the union frame: 1 in the box, 0 elsewhere."""
    cx1, cy1, cx2, cy2 = normalize_to_union(b, u, grid)
    out = np.zeros((grid, grid), dtype=np.float64)
    out[cy1 : cy2 + 1, cx1 : cx2 + 1] = 1.0
    return out


def _point_cell(x: float, y: float, u: UnionBox, grid: int) -> tuple[int, int]:
    # out-of-frame keypoints clip to the boundary cells
    fx = (x - u.box.x1) * grid / u.box.width
    fy = (y - u.box.y1) * grid / u.box.height
    cx = min(max(int(np.floor(fx)), 0), grid - 1)
    cy = min(max(int(np.floor(fy)), 0), grid - 1)
    return cx, cy


def _draw_line(canvas: np.ndarray, x0: int, y0: int, x1: int, y1: int, value: float) -> None:
    # integer midpoint line, width 1, no anti-aliasing
    dx = abs(x1 - x0)
    sx = 1 if x0 < x1 else -1
    dy = -abs(y1 - y0)
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        canvas[y0, x0] = value
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def rasterize_pose_map(
    keypoints: Sequence["Keypoint"],
    u: UnionBox,
    grid: int = DEFAULT_GRID,
    skeleton: Sequence[tuple[int, int]] = COCO_SKELETON,
    gray_values: np.ndarray | None = None,
) -> np.ndarray:
    """Skeleton limbs drawn as gray-valued lines over a zero background.

    A limb is drawn only when both endpoints are visible; limbs drawn later
    overwrite earlier ones at crossings.
    """
    if gray_values is None:
        gray_values = limb_gray_values(len(skeleton))
    out = np.zeros((grid, grid), dtype=np.float64)
    for gray, (a, b) in zip(gray_values, skeleton):
        xa, ya, va = keypoints[a]
        xb, yb, vb = keypoints[b]
        if va <= 0 or vb <= 0:
            continue
        ca = _point_cell(xa, ya, u, grid)
        cb = _point_cell(xb, yb, u, grid)
        _draw_line(out, ca[0], ca[1], cb[0], cb[1], float(gray))
    return out


def build_spatial_tensor(pair, grid: int = DEFAULT_GRID) -> MapTensor:
    """Two-channel [human, object] mask stack for the classifier's spatial stream."""
    human = rasterize_instance_map(pair.human.box, pair.union, grid)
    obj = rasterize_instance_map(pair.object.box, pair.union, grid)
    return MapTensor(np.stack([human, obj]))


def build_spatial_pose_tensor(pair, grid: int = DEFAULT_GRID) -> MapTensor:
    """Three-channel [pose, human, object] stack for the interactiveness stream.

    Missing keypoints (or all-invisible ones) leave the pose channel zero; the
    instance channels are always populated.
    """
    pose = np.zeros((grid, grid), dtype=np.float64)
    if pair.human.keypoints is not None:
        pose = rasterize_pose_map(pair.human.keypoints, pair.union, grid)
    human = rasterize_instance_map(pair.human.box, pair.union, grid)
    obj = rasterize_instance_map(pair.object.box, pair.union, grid)
    return MapTensor(np.stack([pose, human, obj]))


def map_to_text(values: np.ndarray) -> str:
    """Plain-text grid dump (one row per line, cells space-separated)."""
    lines = []
    for row in values:
        lines.append(" ".join(format(v, ".2f") for v in row))
    return "\n".join(lines) + "\n"


def map_to_pgm(values: np.ndarray) -> bytes:
    """Portable graymap (P2, 8-bit) rendering of one map channel."""
    grid_h, grid_w = values.shape
    scaled = np.clip(np.round(values * 255.0), 0, 255).astype(int)
    lines = [f"P2", f"{grid_w} {grid_h}", "255"]
    for row in scaled:
        lines.append(" ".join(str(v) for v in row))
    return ("\n".join(lines) + "\n").encode("ascii")
