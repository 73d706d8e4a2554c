"""Axis-aligned box arithmetic, patch grids and overlap masks.

The overlap mask of a box holds, for each patch of the grid in row-major
order, the covered fraction of that patch. Its padded square form is the
additive bias used by ROI aggregation: only the CLS query row (row 0) is
biased, and only towards patch keys.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, DegenerateBoxError, DimensionError


@dataclass(frozen=True)
class BBox:
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
        return max(0.0, self.width) * max(0.0, self.height)

    def is_valid(self) -> bool:
        return self.x2 > self.x1 and self.y2 > self.y1

    def clamp(self, width: float, height: float) -> "BBox":
        return BBox(
            min(max(self.x1, 0), width),
            min(max(self.y1, 0), height),
            min(max(self.x2, 0), width),
            min(max(self.y2, 0), height),
        )

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_points(cls, points) -> "BBox":
        """Axis-aligned bounding rectangle of a polygon given as (x, y) pairs."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return cls(float(pts[:, 0].min()), float(pts[:, 1].min()),
                   float(pts[:, 0].max()), float(pts[:, 1].max()))


def overlap_area(a: BBox, b: BBox) -> float:
    w = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    h = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    return w * h


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    patch_size: int

    def __post_init__(self):
        p = self.patch_size
        if p <= 0 or self.height <= 0 or self.width <= 0:
            raise ConfigurationError("grid dimensions must be positive")
        if self.height % p or self.width % p:
            raise ConfigurationError(
                f"patch size {p} does not divide image {self.height}x{self.width}"
            )

    @property
    def rows(self) -> int:
        return self.height // self.patch_size

    @property
    def cols(self) -> int:
        return self.width // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols

    @cached_property
    def patch_boxes(self) -> list[BBox]:
        p = self.patch_size
        return [
            BBox(c * p, r * p, (c + 1) * p, (r + 1) * p)
            for r in range(self.rows)
            for c in range(self.cols)
        ]

    @property
    def full_box(self) -> BBox:
        return BBox(0, 0, self.width, self.height)


def compute_overlap_mask(box: BBox, grid: PatchGrid) -> np.ndarray:
    """Per-patch covered fraction of ``box``, flattened row-major."""
    box = box.clamp(grid.width, grid.height)
    if not box.is_valid():
        raise DegenerateBoxError(f"box {box} has zero area inside the image")
    p = grid.patch_size
    edges_x = np.arange(grid.cols + 1) * p
    edges_y = np.arange(grid.rows + 1) * p
    ox = np.clip(np.minimum(box.x2, edges_x[1:]) - np.maximum(box.x1, edges_x[:-1]), 0, None)
    oy = np.clip(np.minimum(box.y2, edges_y[1:]) - np.maximum(box.y1, edges_y[:-1]), 0, None)
    return (np.outer(oy, ox) / float(p * p)).reshape(-1)


def compute_overlap_masks(boxes, grid: PatchGrid) -> np.ndarray:
    """Stacked masks, one row per box."""
    return np.stack([compute_overlap_mask(b, grid) for b in boxes])


def pad_to_bias(mask) -> np.ndarray:
    """Square ``(n+1, n+1)`` bias: row 0, columns 1..n hold the mask, zeros elsewhere."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 1:
        raise DimensionError(f"mask must be a vector, got shape {mask.shape}")
    n = mask.shape[0]
    bias = np.zeros((n + 1, n + 1))
    bias[0, 1:] = mask
    return bias


def bias_rows(masks, scale: float = 1.0, mode: str = "additive") -> np.ndarray:
    """Row 0 of the padded bias for every mask, shape ``(n_obj, n+1)``.

    ``mode='additive'`` adds ``scale * mask``; ``mode='hard'`` additionally
    puts -1e9 on keys the box does not touch.
    """
    masks = np.atleast_2d(np.asarray(masks, dtype=np.float64))
    rows = np.zeros((masks.shape[0], masks.shape[1] + 1))
    rows[:, 1:] = scale * masks
    if mode == "hard":
        rows[:, 1:][masks <= 0] = -1e9
    elif mode != "additive":
        raise ConfigurationError(f"unknown bias mode {mode!r}")
    return rows


def format_mask(mask, grid: PatchGrid, precision: int = 3) -> str:
    """Render a mask as a rows x cols text grid."""
    values = np.asarray(mask).reshape(grid.rows, grid.cols)
    return "\n".join(" ".join(f"{v:.{precision}f}" for v in row) for row in values)
