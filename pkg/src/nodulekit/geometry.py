"""Cube-box arithmetic for 3D detection.

Boxes are axis-aligned cubes described by a center (z, y, x) and a side
length d ("diameter"), all in continuous voxel units. Every function here
is pure: no hidden state, no mutation of inputs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "Box3",
    "RegressionTarget",
    "Stage",
    "Detection",
    "LOG_SIZE_DELTA_LIMIT",
    "iou",
    "iou_matrix",
    "encode_box",
    "decode_box",
    "encode_boxes",
    "decode_boxes",
    "clip_to_volume",
    "hit",
    "nms",
    "nms_indices",
]

# Raw network size regressions are unbounded, and exp() of a large value
# yields boxes whose cubed volumes overflow downstream overlap arithmetic.
# Consumers clamp the log-size component to this magnitude before decoding
# live predictions; encode/decode themselves stay exact.
LOG_SIZE_DELTA_LIMIT = 10.0


@dataclass(frozen=True)
class Box3:
    """Axis-aligned cube: center (z, y, x) and side length d > 0."""

    z: float
    y: float
    x: float
    d: float

    def as_array(self) -> np.ndarray:
        return np.array([self.z, self.y, self.x, self.d], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "Box3":
        z, y, x, d = (float(v) for v in arr)
        return cls(z, y, x, d)

    @property
    def radius(self) -> float:
        return self.d / 2.0


class RegressionTarget(NamedTuple):
    """Normalized offsets of a box relative to an anchor."""

    tz: float
    ty: float
    tx: float
    td: float


class Stage(enum.Enum):
    """Which stage of the pipeline produced a detection."""

    PROPOSAL = "proposal"
    REFINED = "refined"


@dataclass(frozen=True)
class Detection:
    """A scored box. ``source`` links a refined detection to its proposal."""

    box: Box3
    score: float
    stage: Stage
    source: "Detection | None" = field(default=None, compare=False)


def _check_positive_diameters(arr: np.ndarray, name: str) -> None:
    if arr.size and np.any(arr[..., 3] <= 0):
        raise ValueError(f"{name} must have positive side lengths")


def iou(a: Box3, b: Box3) -> float:
    """Intersection-over-union of two cubes.

    Returns a value in [0, 1]; exactly 0 when the cubes are disjoint and
    exactly 1 when they coincide. Raises ValueError on non-positive sides.
    """
    if a.d <= 0 or b.d <= 0:
        raise ValueError("iou requires positive side lengths")
    ra, rb = a.d / 2.0, b.d / 2.0
    inter = 1.0
    for ca, cb in ((a.z, b.z), (a.y, b.y), (a.x, b.x)):
        lo = max(ca - ra, cb - rb)
        hi = min(ca + ra, cb + rb)
        if hi <= lo:
            return 0.0
        inter *= hi - lo
    # Volumes as sequential products so a box's volume rounds exactly like
    # its self-intersection; the min() guards the last few ulps of slop.
    va = a.d * a.d * a.d
    vb = b.d * b.d * b.d
    return min(inter / (va + vb - inter), 1.0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (N, 4) and (M, 4) arrays of cubes.

    Rows are (z, y, x, d). Returns an (N, M) float64 matrix.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    _check_positive_diameters(a, "boxes")
    _check_positive_diameters(b, "boxes")
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    ra = a[:, None, 3] / 2.0
    rb = b[None, :, 3] / 2.0
    inter = np.ones((a.shape[0], b.shape[0]), dtype=np.float64)
    for ax in range(3):
        lo = np.maximum(a[:, None, ax] - ra, b[None, :, ax] - rb)
        hi = np.minimum(a[:, None, ax] + ra, b[None, :, ax] + rb)
        inter *= np.clip(hi - lo, 0.0, None)
    va = a[:, 3] * a[:, 3] * a[:, 3]
    vb = b[:, 3] * b[:, 3] * b[:, 3]
    return np.minimum(inter / (va[:, None] + vb[None, :] - inter), 1.0)


def encode_box(box: Box3, anchor: Box3) -> RegressionTarget:
    """Offsets that move ``anchor`` onto ``box``.

    Center offsets are normalized by the anchor side; the size offset is the
    natural log of the side ratio.
    """
    if box.d <= 0 or anchor.d <= 0:
        raise ValueError("encode_box requires positive side lengths")
    return RegressionTarget(
        (box.z - anchor.z) / anchor.d,
        (box.y - anchor.y) / anchor.d,
        (box.x - anchor.x) / anchor.d,
        math.log(box.d / anchor.d),
    )


def decode_box(target: RegressionTarget, anchor: Box3) -> Box3:
    """Apply regression offsets to an anchor. Exact inverse of encode_box."""
    if anchor.d <= 0:
        raise ValueError("decode_box requires a positive anchor side length")
    tz, ty, tx, td = target
    return Box3(
        anchor.z + tz * anchor.d,
        anchor.y + ty * anchor.d,
        anchor.x + tx * anchor.d,
        anchor.d * math.exp(td),
    )


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorized encode_box over matching (N, 4) arrays."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if boxes.shape != anchors.shape:
        raise ValueError("boxes and anchors must have matching shapes")
    _check_positive_diameters(boxes, "boxes")
    _check_positive_diameters(anchors, "anchors")
    out = np.empty_like(boxes)
    out[:, :3] = (boxes[:, :3] - anchors[:, :3]) / anchors[:, 3:4]
    out[:, 3] = np.log(boxes[:, 3] / anchors[:, 3])
    return out


def decode_boxes(targets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorized decode_box over matching (N, 4) arrays."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if targets.shape != anchors.shape:
        raise ValueError("targets and anchors must have matching shapes")
    _check_positive_diameters(anchors, "anchors")
    out = np.empty_like(targets)
    out[:, :3] = anchors[:, :3] + targets[:, :3] * anchors[:, 3:4]
    out[:, 3] = anchors[:, 3] * np.exp(targets[:, 3])
    return out


def clip_to_volume(box: Box3, side: float) -> Box3:
    """Clamp a cube so it lies inside the volume extent [0, side]^3.

    The side length is capped at ``side`` first, then the center is moved
    the minimal distance needed to fit. The result never degenerates.
    """
    if box.d <= 0:
        raise ValueError("clip_to_volume requires a positive side length")
    d = min(box.d, float(side))
    r = d / 2.0
    return Box3(
        min(max(box.z, r), side - r),
        min(max(box.y, r), side - r),
        min(max(box.x, r), side - r),
        d,
    )


def hit(center: Sequence[float], nodule: Box3) -> bool:
    """True when a detection center falls strictly inside a nodule's radius.

    The criterion is Euclidean distance < d/2; a center exactly on the
    boundary does not count.
    """
    if nodule.d <= 0:
        raise ValueError("hit requires a positive nodule side length")
    cz, cy, cx = (float(v) for v in center)
    dist = math.sqrt((cz - nodule.z) ** 2 + (cy - nodule.y) ** 2 + (cx - nodule.x) ** 2)
    return dist < nodule.d / 2.0


def nms_indices(
    boxes: np.ndarray,
    scores: np.ndarray,
    iou_threshold: float,
    max_keep: int | None = None,
) -> list[int]:
    """Greedy non-maximum suppression on raw arrays; returns kept indices.

    Candidates are visited in canonical order: descending score, ties by
    ascending (z, y, x, d). A candidate is suppressed when its IoU with an
    already-kept box exceeds ``iou_threshold`` strictly. The returned index
    list follows the visiting order, so kept boxes come out sorted by
    descending score. ``max_keep`` stops early; because kept boxes never
    depend on later candidates, the result equals a full run truncated.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in [0, 1]")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError("boxes and scores must have the same length")
    _check_positive_diameters(boxes, "boxes")
    if np.any(~np.isfinite(scores)) or np.any(scores < 0) or np.any(scores > 1):
        raise ValueError("scores must be finite and lie in [0, 1]")
    if boxes.shape[0] == 0:
        return []

    order = np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))
    kept: list[int] = []
    live = np.ones(len(order), dtype=bool)
    sorted_boxes = boxes[order]
    for pos in range(len(order)):
        if not live[pos]:
            continue
        kept.append(int(order[pos]))
        if max_keep is not None and len(kept) >= max_keep:
            break
        rest = np.flatnonzero(live[pos + 1 :]) + pos + 1
        if rest.size == 0:
            continue
        overlap = iou_matrix(sorted_boxes[pos : pos + 1], sorted_boxes[rest])[0]
        live[rest[overlap > iou_threshold]] = False
    return kept


def nms(candidates: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy NMS over detections; see nms_indices for the exact ordering."""
    if not candidates:
        return []
    boxes = np.stack([c.box.as_array() for c in candidates])
    scores = np.array([c.score for c in candidates], dtype=np.float64)
    return [candidates[i] for i in nms_indices(boxes, scores, iou_threshold)]
