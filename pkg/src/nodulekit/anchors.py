"""Anchor lattice construction, ground-truth assignment, and hard-negative mining."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box3, encode_boxes, iou_matrix

__all__ = [
    "POSITIVE",
    "NEGATIVE",
    "IGNORE",
    "AnchorSpec",
    "AnchorGrid",
    "AnchorLabels",
    "build_anchor_grid",
    "assign_anchor_labels",
    "assign_proposal_labels",
    "select_ohem_negatives",
]

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1


@dataclass(frozen=True)
class AnchorSpec:
    """Sizes and placement of the anchor lattice.

    One anchor per (cell, size) pair; anchors sit at cell centers, i.e. at
    voxel coordinate (i + 0.5) * stride along each axis.
    """

    sizes: tuple[float, ...] = (3.0, 5.0, 10.0, 20.0, 30.0)
    stride: int = 4

    def __post_init__(self) -> None:
        if not self.sizes:
            raise ValueError("anchor sizes must be non-empty")
        if any(s <= 0 for s in self.sizes):
            raise ValueError("anchor sizes must be positive")
        if self.stride < 1:
            raise ValueError("anchor stride must be at least 1")
        object.__setattr__(self, "sizes", tuple(float(s) for s in self.sizes))


@dataclass
class AnchorGrid:
    """All anchors for one feature-map shape, flattened cell-major.

    ``boxes`` is (num_cells * num_sizes, 4) with rows (z, y, x, d), ordered
    by cell in z-major order with the size index varying fastest. The array
    is made read-only at construction.
    """

    spec: AnchorSpec
    grid_shape: tuple[int, int, int]
    boxes: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        self.boxes.flags.writeable = False

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def box(self, index: int) -> Box3:
        return Box3.from_array(self.boxes[index])


def build_anchor_grid(grid_shape: Sequence[int], spec: AnchorSpec) -> AnchorGrid:
    """Lay one anchor per size at the center of every feature cell."""
    gz, gy, gx = (int(v) for v in grid_shape)
    if gz < 1 or gy < 1 or gx < 1:
        raise ValueError("grid_shape entries must be positive")
    zs, ys, xs = np.meshgrid(
        (np.arange(gz) + 0.5) * spec.stride,
        (np.arange(gy) + 0.5) * spec.stride,
        (np.arange(gx) + 0.5) * spec.stride,
        indexing="ij",
    )
    centers = np.stack([zs, ys, xs], axis=-1).reshape(-1, 3)
    num_sizes = len(spec.sizes)
    boxes = np.empty((centers.shape[0] * num_sizes, 4), dtype=np.float64)
    boxes[:, :3] = np.repeat(centers, num_sizes, axis=0)
    boxes[:, 3] = np.tile(np.asarray(spec.sizes, dtype=np.float64), centers.shape[0])
    return AnchorGrid(spec=spec, grid_shape=(gz, gy, gx), boxes=boxes)


@dataclass
class AnchorLabels:
    """Per-anchor training labels.

    label: int8 array of POSITIVE / NEGATIVE / IGNORE.
    matched_gt: index of the assigned ground-truth box, -1 where none.
    targets: (N, 4) regression targets, NaN rows for non-positive anchors.
    """

    label: np.ndarray
    matched_gt: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return self.label.shape[0]

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.label == POSITIVE)

    @property
    def negative_indices(self) -> np.ndarray:
        return np.flatnonzero(self.label == NEGATIVE)

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.label == POSITIVE))


def _boxes_array(boxes: Sequence[Box3] | np.ndarray) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack([b.as_array() for b in boxes])


def _assign(
    boxes: np.ndarray,
    gt: np.ndarray,
    pos_iou: float,
    neg_iou: float,
    force_match: bool,
) -> AnchorLabels:
    if not 0.0 <= neg_iou < pos_iou <= 1.0:
        raise ValueError("need 0 <= neg_iou < pos_iou <= 1")
    n = boxes.shape[0]
    label = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    targets = np.full((n, 4), np.nan, dtype=np.float64)
    if gt.shape[0] == 0 or n == 0:
        return AnchorLabels(label, matched, targets)

    overlaps = iou_matrix(boxes, gt)
    best_iou = overlaps.max(axis=1)
    best_gt = overlaps.argmax(axis=1)  # first index on ties

    label[(best_iou >= neg_iou) & (best_iou <= pos_iou)] = IGNORE
    pos_mask = best_iou > pos_iou
    label[pos_mask] = POSITIVE
    matched[pos_mask] = best_gt[pos_mask]

    if force_match:
        # Every ground-truth box claims its best-overlapping anchor, even
        # below the positive threshold, as long as the overlap is non-zero.
        for j in range(gt.shape[0]):
            i = int(overlaps[:, j].argmax())
            if overlaps[i, j] > 0.0:
                label[i] = POSITIVE
                matched[i] = j

    pos = np.flatnonzero(label == POSITIVE)
    if pos.size:
        targets[pos] = encode_boxes(gt[matched[pos]], boxes[pos])
    return AnchorLabels(label, matched, targets)


def assign_anchor_labels(
    grid: AnchorGrid,
    gt: Sequence[Box3],
    pos_iou: float = 0.5,
    neg_iou: float = 0.1,
) -> AnchorLabels:
    """Label every anchor against the ground truth.

    IoU strictly above ``pos_iou`` is positive, strictly below ``neg_iou``
    negative, in between ignored. Each ground-truth box additionally claims
    its best-overlapping anchor when that overlap is non-zero, so no target
    with any anchor overlap goes unmatched. With no ground truth at all,
    every anchor is negative.
    """
    return _assign(grid.boxes, _boxes_array(gt), pos_iou, neg_iou, force_match=True)


def assign_proposal_labels(
    proposals: Sequence[Box3] | np.ndarray,
    gt: Sequence[Box3],
    pos_iou: float = 0.5,
    neg_iou: float = 0.1,
) -> AnchorLabels:
    """Label proposals for the refinement stage.

    Same thresholds as anchor assignment but without the forced best-match:
    a ground-truth box that no proposal overlaps well simply goes unmatched.
    """
    return _assign(_boxes_array(proposals), _boxes_array(gt), pos_iou, neg_iou, force_match=False)


def select_ohem_negatives(
    cls_loss: np.ndarray,
    labels: AnchorLabels,
    neg_per_pos: float = 3.0,
    min_neg: int = 2,
) -> np.ndarray:
    """Pick the hardest negatives by classification loss.

    Keeps k = max(min_neg, ceil(neg_per_pos * num_positive)) negatives,
    capped at the number available. Selection is by descending loss with
    ties broken by ascending anchor index; the result is returned sorted
    ascending. Only entries labeled NEGATIVE are eligible; their losses
    must be finite and non-negative.
    """
    losses = np.asarray(cls_loss, dtype=np.float64).reshape(-1)
    if losses.shape[0] != len(labels):
        raise ValueError("cls_loss length must match the number of anchors")
    eligible = np.flatnonzero(labels.label == NEGATIVE)
    elig_losses = losses[eligible]
    if elig_losses.size and (np.any(~np.isfinite(elig_losses)) or np.any(elig_losses < 0)):
        raise ValueError("negative-anchor losses must be finite and non-negative")
    k = max(int(min_neg), math.ceil(neg_per_pos * labels.num_positive))
    k = min(k, eligible.size)
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((eligible, -elig_losses))
    return np.sort(eligible[order[:k]]).astype(np.int64)
