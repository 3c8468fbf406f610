"""Box arithmetic shared by matching, refinement and evaluation.

Argument order matters for the matching measures: the annotated box comes
first and the proposal second, because the relative distance is normalised
by the proposal's size only.
"""

import math

from core_types import BoundingBox

DEFAULT_GAMMA = 0.1


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0.0 for disjoint or edge-touching boxes."""
    inter_w = min(a.x2, b.x2) - max(a.x1, b.x1)
    inter_h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if inter_w <= 0.0 or inter_h <= 0.0:
        return 0.0
    intersection = inter_w * inter_h
    union = a.area + b.area - intersection
    return min(1.0, intersection / union)


def relative_distance(b: BoundingBox, p: BoundingBox) -> float:
    """Center distance of b and p divided by the proposal's W + H."""
    (bx, by), (px, py) = b.center, p.center
    return math.hypot(bx - px, by - py) / p.half_perimeter


def size_cost(b: BoundingBox, p: BoundingBox) -> float:
    """|(W_b + H_b) / (W_p + H_p) - 1|; not symmetric in its arguments."""
    return abs(b.half_perimeter / p.half_perimeter - 1.0)


def fitness(b: BoundingBox, p: BoundingBox, gamma: float = DEFAULT_GAMMA) -> float:
    """Matching score 1 - (D + gamma * C); 1.0 for identical boxes, may go negative."""
    return 1.0 - (relative_distance(b, p) + gamma * size_cost(b, p))


def blend(b: BoundingBox, p: BoundingBox, alpha: float) -> BoundingBox:
    """Coordinate-wise alpha * p + (1 - alpha) * b."""
    if alpha == 0.0:
        return b
    if alpha == 1.0:
        return p
    keep = 1.0 - alpha
    return BoundingBox(
        alpha * p.x1 + keep * b.x1,
        alpha * p.y1 + keep * b.y1,
        alpha * p.x2 + keep * b.x2,
        alpha * p.y2 + keep * b.y2,
    )


def average3(a: BoundingBox, b: BoundingBox, c: BoundingBox) -> BoundingBox:
    """Coordinate-wise mean of three boxes."""
    if a == b == c:
        return a
    # fsum is exactly rounded, so the result does not depend on argument order
    return BoundingBox(
        *(math.fsum(vals) / 3.0 for vals in zip(a.as_tuple(), b.as_tuple(), c.as_tuple()))
    )


def average2(a: BoundingBox, b: BoundingBox) -> BoundingBox:
    """Coordinate-wise mean of two boxes."""
    return BoundingBox(*((u + v) / 2.0 for u, v in zip(a.as_tuple(), b.as_tuple())))
