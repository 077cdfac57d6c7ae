"""Axis-aligned integer box arithmetic shared by the runtime and the metrics."""

from __future__ import annotations

import math

Box = tuple[int, int, int, int]


def area(box: Box) -> int:
    return max(0, box[2] - box[0]) * max(0, box[3] - box[1])


def intersection(a: Box, b: Box) -> Box | None:
    """Overlap of two boxes, or None when it has no positive area."""
    left, lower = max(a[0], b[0]), max(a[1], b[1])
    right, upper = min(a[2], b[2]), min(a[3], b[3])
    if left >= right or lower >= upper:
        return None
    return (left, lower, right, upper)


def iou(a: Box, b: Box) -> float:
    inter = intersection(a, b)
    if inter is None:
        return 0.0
    i = area(inter)
    return i / (area(a) + area(b) - i)


def edge_gap(a: Box, b: Box) -> float:
    """Euclidean distance between the closest points of two boxes (0 when touching)."""
    dx = max(0, a[0] - b[2], b[0] - a[2])
    dy = max(0, a[1] - b[3], b[1] - a[3])
    return math.hypot(dx, dy)
