"""Two-phase training: proposal-head warmup, then joint end-to-end training.

Epochs below phase1_epochs update only the feature extractor and proposal
head; the refinement head receives no gradients and its parameters stay
bit-identical. From phase1_epochs on, proposals sampled from the live
model (plus the ground-truth boxes) feed the refinement head and the joint
loss trains everything together.

Determinism contract: with deterministic mode on, every random draw is a
pure function of (seed, purpose tag, epoch, step), so a run resumed from a
checkpoint reproduces the uninterrupted run bit-exactly.

Metrics log schema (newline-delimited JSON, one object per line):
  step records:  {"kind": "step", "epoch", "step", "sample_id", "lr",
                  "rpn_cls", "rpn_reg", "rpn_total",
                  "fpr_cls", "fpr_reg", "fpr_total" (null during phase 1),
                  "loss"}
  epoch records: {"kind": "epoch", "epoch", "step", "val_cpm",
                  "val_stage": "proposal"|"refined", "val_proposal_cpm",
                  "val_refined_cpm", "best_cpm"}

val_cpm scores the phase's own output (proposals during warmup, refined
detections afterwards) and drives best-checkpoint selection; the two
val_*_cpm fields score both stages of the same detection pass so the
proposal head's trajectory stays visible through the joint phase.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch

from .anchors import (
    POSITIVE,
    AnchorGrid,
    AnchorLabels,
    assign_anchor_labels,
    assign_proposal_labels,
    build_anchor_grid,
)
from .data import VolumeSample, augment
from .geometry import LOG_SIZE_DELTA_LIMIT, Box3, RegressionTarget, Stage, decode_boxes
from .inference import InferenceConfig, evaluate_model, froc
from .losses import LossBreakdown, LossConfig, joint_loss, stage_loss
from .network import (
    NetworkConfig,
    NoduleNet,
    OPTIMIZER_MAGIC,
    RpnOutput,
    build_network,
    load_checkpoint,
    read_array_container,
    save_checkpoint,
    write_array_container,
)

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainingDiverged",
    "ProposalSample",
    "lr_at",
    "sample_proposals_for_fpr",
    "train",
    "fpr_checksum",
    "save_optimizer_state",
    "load_optimizer_state",
]

CHECKPOINT_LAST = "checkpoint_last.ndck"
CHECKPOINT_BEST = "checkpoint_best.ndck"
OPTIMIZER_LAST = "optimizer_last.ndop"
TRAIN_STATE_FILE = "trainstate.json"
METRICS_FILE = "metrics.jsonl"


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; diagnostics are attached."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and proposal-sampling parameters.

    Epoch counts and the decay points of the default lr_schedule are
    desk-scale defaults (decays at 1/2 and 3/4 of the run); thresholds
    count global epochs from 0 (warmup epochs included). One volume is
    processed per step; batch_size > 1 accumulates gradients over several
    volumes before each optimizer update. proposal_prob_threshold sits
    below the inference-time proposal filter and max_fpr_proposals keeps
    the slate wide: the refinement head must keep seeing background and
    near-miss candidates even once the proposal head grows confident, or
    its training set degenerates to positives only.
    """

    phase1_epochs: int = 20
    total_epochs: int = 60
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 0.01), (30, 0.001), (45, 0.0001))
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 1
    proposal_prob_threshold: float = 0.05
    max_fpr_proposals: int = 256
    append_gt_proposals: bool = True
    fpr_loss_weight: float = 1.0
    augment: bool = True
    deterministic: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.phase1_epochs < self.total_epochs:
            raise ValueError("need 0 <= phase1_epochs < total_epochs")
        schedule = tuple((int(e), float(lr)) for e, lr in self.lr_schedule)
        if not schedule or schedule[0][0] != 0:
            raise ValueError("lr_schedule must start at epoch 0")
        thresholds = [e for e, _ in schedule]
        if thresholds != sorted(set(thresholds)):
            raise ValueError("lr_schedule thresholds must be strictly increasing")
        if any(lr <= 0 for _, lr in schedule):
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 <= self.proposal_prob_threshold <= 1.0:
            raise ValueError("proposal_prob_threshold must lie in [0, 1]")
        if self.max_fpr_proposals < 1:
            raise ValueError("max_fpr_proposals must be at least 1")
        object.__setattr__(self, "lr_schedule", schedule)


@dataclass
class TrainState:
    """The trainer's output: the model plus everything needed to continue."""

    model: NoduleNet
    optimizer: torch.optim.SGD
    epoch: int
    step: int
    metrics_log: list[dict]
    best_cpm: float = float("-inf")
    best_epoch: int = -1


class ProposalSample(NamedTuple):
    """One refinement-stage training example."""

    box: Box3
    label: int
    target: Optional[RegressionTarget]


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Piecewise-constant schedule lookup: the rate whose threshold is the
    largest one not exceeding ``epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    lr = config.lr_schedule[0][1]
    for threshold, value in config.lr_schedule:
        if epoch >= threshold:
            lr = value
    return lr


def _sample_proposals(
    rpn_out: RpnOutput,
    grid: AnchorGrid,
    gt: Sequence[Box3],
    config: TrainConfig,
) -> tuple[np.ndarray, AnchorLabels]:
    """Boxes + labels for the refinement stage; see sample_proposals_for_fpr."""
    probs = torch.sigmoid(rpn_out.logits.detach()).double().cpu().numpy()
    deltas = rpn_out.deltas.detach().double().cpu().numpy()
    if probs.shape[0] != len(grid):
        raise ValueError("rpn output is not aligned with the anchor grid")
    selected = np.flatnonzero(probs >= config.proposal_prob_threshold)
    if selected.size:
        order = np.lexsort((selected, -probs[selected]))
        selected = selected[order[: config.max_fpr_proposals]]
        picked = deltas[selected]
        picked[:, 3] = np.clip(picked[:, 3], -LOG_SIZE_DELTA_LIMIT, LOG_SIZE_DELTA_LIMIT)
        boxes = decode_boxes(picked, grid.boxes[selected])
    else:
        boxes = np.zeros((0, 4), dtype=np.float64)
    if config.append_gt_proposals and len(gt):
        boxes = np.concatenate([boxes, np.stack([b.as_array() for b in gt])])
    labels = assign_proposal_labels(boxes, gt)
    return boxes, labels


def sample_proposals_for_fpr(
    rpn_out: RpnOutput,
    grid: AnchorGrid,
    gt: Sequence[Box3],
    config: TrainConfig,
) -> list[ProposalSample]:
    """Pick refinement-stage training proposals from live proposal scores.

    Every anchor whose predicted probability reaches the threshold is
    decoded; the decoded boxes are capped at max_fpr_proposals by
    descending score (ties to the lower anchor index); each ground-truth
    box is then appended as a guaranteed positive. Labels and targets come
    from proposal assignment over the final list. Empty output means the
    refinement stage is skipped this step.
    """
    boxes, labels = _sample_proposals(rpn_out, grid, gt, config)
    out = []
    for i in range(boxes.shape[0]):
        target = None
        if labels.label[i] == POSITIVE:
            target = RegressionTarget(*labels.targets[i])
        out.append(ProposalSample(Box3.from_array(boxes[i]), int(labels.label[i]), target))
    return out


def fpr_checksum(model: NoduleNet) -> str:
    """SHA-256 over the refinement head's raw parameter bytes."""
    digest = hashlib.sha256()
    for name, param in sorted(model.fpr.state_dict().items()):
        digest.update(name.encode())
        digest.update(param.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def save_optimizer_state(optimizer: torch.optim.SGD, model: NoduleNet, path) -> None:
    """Persist momentum buffers keyed by parameter name."""
    arrays = {}
    for name, param in model.named_parameters():
        state = optimizer.state.get(param, {})
        buf = state.get("momentum_buffer")
        if buf is not None:
            arrays[f"momentum/{name}"] = buf.detach().cpu().numpy().astype(np.float32)
    write_array_container(path, OPTIMIZER_MAGIC, {"kind": "sgd-momentum"}, arrays)


def load_optimizer_state(optimizer: torch.optim.SGD, model: NoduleNet, path) -> None:
    meta, arrays = read_array_container(path, OPTIMIZER_MAGIC)
    params = dict(model.named_parameters())
    for key, arr in arrays.items():
        if not key.startswith("momentum/"):
            raise ValueError(f"{path}: unexpected optimizer array {key!r}")
        name = key[len("momentum/") :]
        if name not in params:
            raise ValueError(f"{path}: momentum buffer for unknown parameter {name!r}")
        param = params[name]
        optimizer.state[param]["momentum_buffer"] = torch.from_numpy(arr).to(param.dtype)


def _volume_tensor(sample: VolumeSample) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(sample.volume, dtype=np.float32))


def _diverged(out_path: Optional[Path], diagnostics: dict) -> None:
    """Dump diagnostics next to the checkpoints (if any) and abort."""
    if out_path is not None:
        (out_path / "divergence.json").write_text(json.dumps(diagnostics, indent=2) + "\n")
    raise TrainingDiverged(
        f"{diagnostics['reason']} at epoch {diagnostics['epoch']} step {diagnostics['step']}: {diagnostics}"
    )


def _check_finite_outputs(out, head: str, epoch: int, step: int, sample_id: str, out_path) -> None:
    if bool(torch.isfinite(out.logits).all()) and bool(torch.isfinite(out.deltas).all()):
        return
    _diverged(
        out_path,
        {
            "epoch": epoch,
            "step": step,
            "sample_id": sample_id,
            "reason": f"non-finite {head} outputs",
            "rpn": None,
            "fpr": None,
        },
    )


def _step_record(
    epoch: int,
    step: int,
    sample_id: str,
    lr: float,
    rpn: LossBreakdown,
    fpr: Optional[LossBreakdown],
    loss: float,
) -> dict:
    rec = {
        "kind": "step",
        "epoch": epoch,
        "step": step,
        "sample_id": sample_id,
        "lr": lr,
        "rpn_cls": rpn.scalars()["cls"],
        "rpn_reg": rpn.scalars()["reg"],
        "rpn_total": rpn.scalars()["total"],
        "fpr_cls": None,
        "fpr_reg": None,
        "fpr_total": None,
        "loss": loss,
    }
    if fpr is not None:
        rec["fpr_cls"] = fpr.scalars()["cls"]
        rec["fpr_reg"] = fpr.scalars()["reg"]
        rec["fpr_total"] = fpr.scalars()["total"]
    return rec


def _append_metrics(out_dir: Optional[Path], records: Sequence[dict]) -> None:
    if out_dir is None or not records:
        return
    with open(out_dir / METRICS_FILE, "a") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def _write_train_state(out_dir: Path, state: TrainState) -> None:
    payload = {
        "epoch_completed": state.epoch,
        "step": state.step,
        "best_cpm": None if math.isinf(state.best_cpm) else state.best_cpm,
        "best_epoch": state.best_epoch,
    }
    (out_dir / TRAIN_STATE_FILE).write_text(json.dumps(payload, indent=2) + "\n")


def train(
    samples: Sequence[VolumeSample],
    config: TrainConfig = TrainConfig(),
    net_config: NetworkConfig = NetworkConfig(),
    loss_config: LossConfig = LossConfig(),
    inference_config: InferenceConfig = InferenceConfig(),
    val_samples: Optional[Sequence[VolumeSample]] = None,
    out_dir=None,
    resume_from=None,
) -> TrainState:
    """Run the two-phase loop over whole volumes.

    val_samples defaults to the training samples (overfit-style monitoring).
    With out_dir set, the last and best-validation checkpoints, optimizer
    sidecar, metrics log, and a resumable trainstate file are maintained at
    every epoch boundary. resume_from accepts a directory produced that way.
    Raises TrainingDiverged on a non-finite loss, dumping diagnostics.
    """
    if not samples:
        raise ValueError("training requires at least one sample")
    side = net_config.input_side
    for s in samples:
        if s.volume.shape != (side, side, side):
            raise ValueError(f"sample {s.sample_id} shape {s.volume.shape} != network side {side}")
    val = list(val_samples) if val_samples is not None else list(samples)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)

    metrics_log: list[dict] = []
    start_epoch = 0
    global_step = 0
    best_cpm = float("-inf")
    best_epoch = -1

    if resume_from is not None:
        resume_dir = Path(resume_from)
        model = load_checkpoint(resume_dir / CHECKPOINT_LAST)
        optimizer = torch.optim.SGD(
            model.parameters(),
            lr=config.lr_schedule[0][1],
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        opt_path = resume_dir / OPTIMIZER_LAST
        if opt_path.exists():
            load_optimizer_state(optimizer, model, opt_path)
        saved = json.loads((resume_dir / TRAIN_STATE_FILE).read_text())
        start_epoch = int(saved["epoch_completed"])
        global_step = int(saved["step"])
        best_cpm = float("-inf") if saved["best_cpm"] is None else float(saved["best_cpm"])
        best_epoch = int(saved["best_epoch"])
        metrics_path = resume_dir / METRICS_FILE
        if metrics_path.exists():
            with open(metrics_path) as f:
                metrics_log = [json.loads(line) for line in f if line.strip()]
    else:
        model = build_network(net_config, seed=config.seed)
        optimizer = torch.optim.SGD(
            model.parameters(),
            lr=config.lr_schedule[0][1],
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )

    grid = build_anchor_grid(net_config.grid_shape, net_config.anchor_spec)
    state = TrainState(model, optimizer, start_epoch, global_step, metrics_log, best_cpm, best_epoch)

    for epoch in range(start_epoch, config.total_epochs):
        lr = lr_at(epoch, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        joint_phase = epoch >= config.phase1_epochs
        order = np.random.default_rng([config.seed, 3, epoch]).permutation(len(samples))
        epoch_records: list[dict] = []

        model.train()
        for batch_start in range(0, len(order), config.batch_size):
            batch = order[batch_start : batch_start + config.batch_size]
            optimizer.zero_grad(set_to_none=True)
            for sample_idx in batch:
                sample = samples[int(sample_idx)]
                if config.augment:
                    rng = np.random.default_rng([config.seed, 5, epoch, state.step])
                    sample = augment(sample, rng)
                features = model.forward_features(_volume_tensor(sample))
                rpn_out = model.forward_rpn(features)
                _check_finite_outputs(rpn_out, "rpn", epoch, state.step, sample.sample_id, out_path)
                labels = assign_anchor_labels(grid, sample.nodules)
                rpn_bd = stage_loss(rpn_out.logits, rpn_out.deltas, labels, loss_config, use_ohem=True)
                fpr_bd = None
                if joint_phase:
                    boxes, plabels = _sample_proposals(rpn_out, grid, sample.nodules, config)
                    if boxes.shape[0]:
                        proposals = [Box3.from_array(b) for b in boxes]
                        fpr_out = model.forward_fpr(features, proposals)
                        _check_finite_outputs(fpr_out, "fpr", epoch, state.step, sample.sample_id, out_path)
                        fpr_bd = stage_loss(
                            fpr_out.logits,
                            fpr_out.deltas,
                            plabels,
                            loss_config,
                            use_ohem=loss_config.stage2_ohem,
                        )
                loss = joint_loss(rpn_bd, fpr_bd, config.fpr_loss_weight)
                loss_value = float(loss.detach())
                if not math.isfinite(loss_value):
                    _diverged(
                        out_path,
                        {
                            "epoch": epoch,
                            "step": state.step,
                            "sample_id": sample.sample_id,
                            "reason": "non-finite loss",
                            "rpn": rpn_bd.scalars(),
                            "fpr": fpr_bd.scalars() if fpr_bd is not None else None,
                        },
                    )
                (loss / len(batch)).backward()
                epoch_records.append(
                    _step_record(epoch, state.step, sample.sample_id, lr, rpn_bd, fpr_bd, loss_value)
                )
                state.step += 1
            optimizer.step()

        model.eval()
        val_stage = Stage.REFINED if joint_phase else Stage.PROPOSAL
        val_cpm = proposal_cpm = refined_cpm = None
        if val and sum(len(s.nodules) for s in val) > 0:
            curve, results = evaluate_model(model, val, inference_config, stage=val_stage)
            val_cpm = curve.cpm
            gt = {s.sample_id: s.nodules for s in val}
            proposal_cpm = froc(results, gt, inference_config.fp_rates, Stage.PROPOSAL).cpm
            refined_cpm = froc(results, gt, inference_config.fp_rates, Stage.REFINED).cpm
        improved = val_cpm is not None and val_cpm > state.best_cpm
        if improved:
            state.best_cpm = val_cpm
            state.best_epoch = epoch
        epoch_records.append(
            {
                "kind": "epoch",
                "epoch": epoch,
                "step": state.step,
                "val_cpm": val_cpm,
                "val_stage": val_stage.value,
                "val_proposal_cpm": proposal_cpm,
                "val_refined_cpm": refined_cpm,
                "best_cpm": None if math.isinf(state.best_cpm) else state.best_cpm,
            }
        )
        state.epoch = epoch + 1
        state.metrics_log.extend(epoch_records)
        if out_path is not None:
            save_checkpoint(model, out_path / CHECKPOINT_LAST)
            save_optimizer_state(optimizer, model, out_path / OPTIMIZER_LAST)
            if improved:
                save_checkpoint(model, out_path / CHECKPOINT_BEST)
            _append_metrics(out_path, epoch_records)
            _write_train_state(out_path, state)

    return state
