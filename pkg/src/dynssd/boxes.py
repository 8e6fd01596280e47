"""Box overlap, proposal records and non-maximum suppression."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .imaging import BoundingBox


@dataclass(frozen=True)
class RegionProposal:
    box: BoundingBox
    objectness: float


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.width * a.height + b.width * b.height - inter
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner-form boxes, shapes (A, 4) x (B, 4) -> (A, B)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"NMS IoU threshold must lie in (0, 1], got {iou_threshold}")
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    return kernels.nms(
        np.ascontiguousarray(boxes, dtype=np.float64), np.ascontiguousarray(scores, dtype=np.float64), iou_threshold
    )


def nms(proposals: Sequence[RegionProposal], iou_threshold: float) -> list[RegionProposal]:
    """Greedy suppression by descending score; equal scores keep the earlier proposal first."""
    proposals = list(proposals)
    keep = nms_indices(
        boxes_to_array([p.box for p in proposals]), np.array([p.objectness for p in proposals]), iou_threshold
    )
    return [proposals[i] for i in keep]


def jitter_box(
    box: BoundingBox, rng: np.random.Generator, amount: float = 0.1, bounds: tuple[int, int] | None = None
) -> BoundingBox:
    """Move each edge by up to ``amount`` of the box extent, optionally clipped to (height, width).

    Falls back to the original box if jitter would leave less than a pixel.
    """
    dx = rng.uniform(-amount, amount, 2) * box.width
    dy = rng.uniform(-amount, amount, 2) * box.height
    x0, x1 = box.x_min + dx[0], box.x_max + dx[1]
    y0, y1 = box.y_min + dy[0], box.y_max + dy[1]
    if bounds is not None:
        h, w = bounds
        x0, x1 = max(0.0, x0), min(float(w), x1)
        y0, y1 = max(0.0, y0), min(float(h), y1)
    if x1 - x0 < 1.0 or y1 - y0 < 1.0:
        return box
    return BoundingBox(x0, y0, x1, y1)
