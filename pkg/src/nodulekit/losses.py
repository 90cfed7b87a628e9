"""Joint classification + regression loss with online hard-negative mining.

Classification is binary cross-entropy in logit space over the positive
anchors plus the mined negatives, normalized by the number of contributing
anchors. Regression is an L1 penalty on the offset vectors of positive
anchors, normalized by their count. Both stages use the same form; mining
is on for the proposal stage and off (all negatives kept) for refinement.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .anchors import AnchorLabels, select_ohem_negatives

__all__ = ["LossConfig", "LossBreakdown", "stage_loss", "joint_loss"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    """Loss weighting and mining parameters.

    lambda_balance scales the regression term against classification.
    smooth_l1 switches the regression penalty from plain L1 to its
    Huber-smoothed variant (off by default). stage2_ohem applies the same
    hard-negative mining to the refinement stage that the proposal stage
    always uses; with a wide proposal slate the negatives there outnumber
    positives by enough that plain averaging drowns the positive term.
    """

    lambda_balance: float = 1.0
    ohem_neg_per_pos: float = 3.0
    ohem_min_neg: int = 2
    smooth_l1: bool = False
    stage2_ohem: bool = True

    def __post_init__(self) -> None:
        if self.lambda_balance <= 0:
            raise ValueError("lambda_balance must be positive")
        if self.ohem_neg_per_pos < 0 or self.ohem_min_neg < 0:
            raise ValueError("mining parameters must be non-negative")


@dataclass
class LossBreakdown:
    """One stage's loss terms plus the sets that produced them."""

    cls_loss: torch.Tensor
    reg_loss: torch.Tensor
    total: torch.Tensor
    n_cls: int
    n_reg: int
    cls_indices: np.ndarray

    def scalars(self) -> dict[str, float]:
        return {
            "cls": float(self.cls_loss.detach()),
            "reg": float(self.reg_loss.detach()),
            "total": float(self.total.detach()),
            "n_cls": self.n_cls,
            "n_reg": self.n_reg,
        }


def stage_loss(
    logits: torch.Tensor,
    deltas: torch.Tensor,
    labels: AnchorLabels,
    config: LossConfig = LossConfig(),
    use_ohem: bool = True,
) -> LossBreakdown:
    """Classification + regression loss for one stage.

    Ignored anchors contribute nothing; with mining enabled the negatives
    are reduced to the hardest ones by their own BCE loss. A batch with no
    contributing anchors at all yields zero losses and a warning.
    """
    if logits.dim() != 1 or deltas.shape != (logits.shape[0], 4):
        raise ValueError("logits must be (N,) and deltas (N, 4)")
    if logits.shape[0] != len(labels):
        raise ValueError("labels must match the number of anchors")

    pos = labels.positive_indices
    if use_ohem:
        with torch.no_grad():
            # BCE of every anchor against target 0; only entries labeled
            # negative are eligible, so the rest are never inspected.
            neg_losses = F.binary_cross_entropy_with_logits(
                logits, torch.zeros_like(logits), reduction="none"
            )
        neg = select_ohem_negatives(
            neg_losses.cpu().numpy().astype(np.float64),
            labels,
            neg_per_pos=config.ohem_neg_per_pos,
            min_neg=config.ohem_min_neg,
        )
    else:
        neg = labels.negative_indices

    contributing = np.concatenate([pos, neg]).astype(np.int64)
    n_cls = int(contributing.size)
    n_reg = int(pos.size)
    zero = logits.sum() * 0.0

    if n_cls == 0 and n_reg == 0:
        log.warning("stage_loss: no contributing anchors in this batch")
        return LossBreakdown(zero, zero.clone(), zero.clone(), 0, 0, contributing)

    if n_cls > 0:
        idx = torch.from_numpy(contributing)
        y = torch.zeros(n_cls, dtype=logits.dtype, device=logits.device)
        y[: len(pos)] = 1.0
        cls = F.binary_cross_entropy_with_logits(logits[idx], y, reduction="sum") / n_cls
    else:
        cls = zero

    if n_reg > 0:
        pos_idx = torch.from_numpy(pos)
        tgt = torch.from_numpy(labels.targets[pos]).to(deltas.dtype)
        if config.smooth_l1:
            reg = F.smooth_l1_loss(deltas[pos_idx], tgt, reduction="sum") / n_reg
        else:
            reg = torch.abs(deltas[pos_idx] - tgt).sum() / n_reg
    else:
        reg = zero.clone()

    total = cls + config.lambda_balance * reg
    return LossBreakdown(cls, reg, total, n_cls, n_reg, np.sort(contributing))


def joint_loss(
    rpn: LossBreakdown,
    fpr: Optional[LossBreakdown] = None,
    fpr_weight: float = 1.0,
) -> torch.Tensor:
    """Sum of stage losses; the refinement term is optional (warm-up phase).

    The gradient of the result with respect to any shared parameter is the
    sum of the per-stage gradients; nothing is renormalized here.
    """
    if fpr is None:
        return rpn.total
    return rpn.total + fpr_weight * fpr.total
