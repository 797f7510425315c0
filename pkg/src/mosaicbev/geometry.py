"""Oriented-box math: AABB conversion, IoU, a rasterization oracle, NMS, matching.

Boxes live in normalized [0,1] coordinates. All functions here are pure and
frame-agnostic: they treat (cx, cy) as ordinary Euclidean coordinates, so the
same code serves both the y-up ground-truth convention and the y-down raster
convention used by the model (IoU and AABB extents are invariant under the
flip).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    t = math.remainder(theta, 2.0 * math.pi)
    if t <= -math.pi:
        t = math.pi
    return t


@dataclass(frozen=True)
class OrientedBox:
    """Rectangle with center (cx, cy), positive extents, heading theta.

    theta is the angle of the width axis, in radians, normalized to (-pi, pi].
    """

    cx: float
    cy: float
    width: float
    height: float
    theta: float

    def __post_init__(self):
        for name in ("cx", "cy", "width", "height", "theta"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"OrientedBox.{name} must be finite")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(
                f"OrientedBox extents must be positive, got {self.width}x{self.height}"
            )
        if not -math.pi < self.theta <= math.pi:
            raise ValidationError(f"OrientedBox.theta {self.theta} outside (-pi, pi]")


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box [xmin, xmax] x [ymin, ymax]."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if self.xmin > self.xmax or self.ymin > self.ymax:
            raise ValidationError(
                f"Aabb corners out of order: ({self.xmin},{self.ymin},{self.xmax},{self.ymax})"
            )

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


@dataclass(frozen=True)
class Detection:
    """One decoded prediction: a box, its confidence, and its source cell."""

    box: OrientedBox
    confidence: float
    scale_index: int
    cell: tuple[int, int]  # (m, n) = (column, row) on the owning grid

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0,1]")


def corners(b: OrientedBox) -> np.ndarray:
    """The four corners of an oriented box, as a 4x2 array."""
    c, s = math.cos(b.theta), math.sin(b.theta)
    hw, hh = b.width / 2.0, b.height / 2.0
    out = np.empty((4, 2))
    for i, (dx, dy) in enumerate(((hw, hh), (hw, -hh), (-hw, hh), (-hw, -hh))):
        out[i, 0] = b.cx + dx * c - dy * s
        out[i, 1] = b.cy + dx * s + dy * c
    return out


def to_aabb(b: OrientedBox) -> Aabb:
    """Tight axis-aligned bound of the rotated corners (closed form)."""
    ac, as_ = abs(math.cos(b.theta)), abs(math.sin(b.theta))
    ex = (b.width * ac + b.height * as_) / 2.0
    ey = (b.width * as_ + b.height * ac) / 2.0
    return Aabb(b.cx - ex, b.cy - ey, b.cx + ex, b.cy + ey)


def iou_aabb(a: Aabb, b: Aabb) -> float:
    """Intersection over union of two axis-aligned boxes; 0 when the union is empty."""
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_aabb_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized AABB IoU: a is (..., 4), b is (..., 4), rows (xmin, ymin, xmax, ymax)."""
    iw = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    ih = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    out = np.zeros(np.broadcast(a[..., 0], b[..., 0]).shape)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def _points_in_box(px: np.ndarray, py: np.ndarray, b: OrientedBox) -> np.ndarray:
    """Boolean mask of points inside an oriented box (boundary counts as inside)."""
    c, s = math.cos(b.theta), math.sin(b.theta)
    dx, dy = px - b.cx, py - b.cy
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (np.abs(u) <= b.width / 2.0) & (np.abs(v) <= b.height / 2.0)


def iou_oriented_oracle(a: OrientedBox, b: OrientedBox, resolution: int = 1000) -> float:
    """Pixel-counting IoU of two oriented boxes on a resolution^2 grid.

    Test oracle only; never used in the training path. The grid covers the
    joint bound of both AABBs, pixel centers are classified against both
    boxes, and the IoU is the count ratio. Error shrinks as 1/resolution.
    """
    if resolution < 100:
        raise ValidationError(f"oracle resolution must be >= 100, got {resolution}")
    aa, bb = to_aabb(a), to_aabb(b)
    xmin, xmax = min(aa.xmin, bb.xmin), max(aa.xmax, bb.xmax)
    ymin, ymax = min(aa.ymin, bb.ymin), max(aa.ymax, bb.ymax)
    if xmax <= xmin or ymax <= ymin:
        return 0.0
    xs = xmin + (np.arange(resolution) + 0.5) * ((xmax - xmin) / resolution)
    ys = ymin + (np.arange(resolution) + 0.5) * ((ymax - ymin) / resolution)
    px, py = np.meshgrid(xs, ys)
    in_a = _points_in_box(px, py, a)
    in_b = _points_in_box(px, py, b)
    inter = int(np.count_nonzero(in_a & in_b))
    union = int(np.count_nonzero(in_a | in_b))
    if union == 0:
        return 0.0
    return inter / union


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression on AABB IoU.

    Detections are visited by confidence descending, ties broken by
    (scale_index, m, n) ascending; one is kept iff its IoU with every
    already-kept detection is <= iou_threshold. Kept order is preserved.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValidationError(f"nms threshold {iou_threshold} outside [0,1]")
    order = sorted(
        range(len(dets)),
        key=lambda i: (-dets[i].confidence, dets[i].scale_index,
                       dets[i].cell[0], dets[i].cell[1]),
    )
    boxes = [to_aabb(d.box) for d in dets]
    kept: list[int] = []
    for i in order:
        if all(iou_aabb(boxes[i], boxes[j]) <= iou_threshold for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def match_greedy(preds: list[Detection], gts: list[OrientedBox],
                 iou_min: float) -> list[tuple[int, int, float]]:
    """Greedy one-to-one matching by AABB IoU.

    Repeatedly picks the unmatched (pred, gt) pair with the highest IoU >=
    iou_min; ties broken by (pred index, gt index) ascending. Returns
    (pred index, gt index, iou) triples in pick order.
    """
    pairs = []
    gt_aabbs = [to_aabb(g) for g in gts]
    for pi, p in enumerate(preds):
        pa = to_aabb(p.box)
        for gi, ga in enumerate(gt_aabbs):
            iou = iou_aabb(pa, ga)
            if iou >= iou_min:
                pairs.append((-iou, pi, gi))
    pairs.sort()
    used_p: set[int] = set()
    used_g: set[int] = set()
    out: list[tuple[int, int, float]] = []
    for neg_iou, pi, gi in pairs:
        if pi in used_p or gi in used_g:
            continue
        used_p.add(pi)
        used_g.add(gi)
        out.append((pi, gi, -neg_iou))
    return out
