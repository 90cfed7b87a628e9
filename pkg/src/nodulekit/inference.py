"""End-to-end detection, FROC/CPM evaluation, timing benchmark, rendering.

The detection pipeline runs the feature extractor exactly once per volume
(observable through the model's backbone-pass counter): proposal scoring
over all anchors, score filter, greedy NMS, top-K selection, RoI pooling
on the same features, refinement head, final NMS.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .anchors import build_anchor_grid
from .data import VolumeSample
from .geometry import (
    LOG_SIZE_DELTA_LIMIT,
    Box3,
    Detection,
    Stage,
    decode_boxes,
    hit,
    nms,
    nms_indices,
)
from .network import NoduleNet

__all__ = [
    "InferenceConfig",
    "ScanResult",
    "FrocCurve",
    "ModelStateError",
    "detect",
    "froc",
    "evaluate_model",
    "benchmark_inference",
    "render_slices",
    "write_detections_csv",
    "read_detections_csv",
    "write_froc_report",
    "write_sweep_csv",
    "DEFAULT_FP_RATES",
]

DEFAULT_FP_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


class ModelStateError(RuntimeError):
    """Raised when detection is attempted with an uninitialized model."""


@dataclass(frozen=True)
class InferenceConfig:
    """Candidate selection thresholds between the two stages.

    score_fusion picks the final detection score: "fpr" uses the refinement
    probability alone, "geometric_mean" fuses it with the proposal score.
    The fused form is the default: the refinement head sees each candidate
    only through its pooled feature grid, and discarding the proposal score
    throws away the ranking signal of the full-resolution stage with it.
    """

    score_threshold: float = 0.1
    nms_iou: float = 0.1
    top_k: int = 32
    score_fusion: str = "geometric_mean"
    fp_rates: tuple[float, ...] = DEFAULT_FP_RATES

    def __post_init__(self) -> None:
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must lie in [0, 1]")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError("nms_iou must lie in [0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if self.score_fusion not in ("fpr", "geometric_mean"):
            raise ValueError("score_fusion must be 'fpr' or 'geometric_mean'")
        if not self.fp_rates or any(r <= 0 for r in self.fp_rates):
            raise ValueError("fp_rates must be positive")
        object.__setattr__(self, "fp_rates", tuple(float(r) for r in self.fp_rates))


@dataclass
class ScanResult:
    """Both stages' outputs for one volume, each sorted by descending score."""

    sample_id: str
    detections: list[Detection]
    proposals: list[Detection]


@dataclass
class FrocCurve:
    """Operating points at the predefined FPs/scan rates and their mean.

    operating_points holds the achieved (fps_per_scan, sensitivity) pair
    chosen for each rate in fp_rates; sweep keeps every threshold point
    (threshold, fps_per_scan, sensitivity) for plotting.
    """

    operating_points: list[tuple[float, float]]
    cpm: float
    fp_rates: tuple[float, ...] = DEFAULT_FP_RATES
    sweep: list[tuple[float, float, float]] = field(default_factory=list)


def _propose(
    model: NoduleNet, features: torch.Tensor, config: InferenceConfig
) -> list[Detection]:
    rpn = model.forward_rpn(features)
    probs = torch.sigmoid(rpn.logits).double().cpu().numpy()
    deltas = rpn.deltas.double().cpu().numpy()
    grid = build_anchor_grid(model.config.grid_shape, model.config.anchor_spec)
    keep = np.flatnonzero(probs >= config.score_threshold)
    if keep.size == 0:
        return []
    picked = deltas[keep]
    picked[:, 3] = np.clip(picked[:, 3], -LOG_SIZE_DELTA_LIMIT, LOG_SIZE_DELTA_LIMIT)
    boxes = decode_boxes(picked, grid.boxes[keep])
    scores = probs[keep]
    kept = nms_indices(boxes, scores, config.nms_iou, max_keep=config.top_k)
    return [
        Detection(Box3.from_array(boxes[i]), float(scores[i]), Stage.PROPOSAL) for i in kept
    ]


def _refine(
    model: NoduleNet,
    features: torch.Tensor,
    proposals: Sequence[Detection],
    config: InferenceConfig,
) -> list[Detection]:
    if not proposals:
        return []
    out = model.forward_fpr(features, [p.box for p in proposals])
    probs = torch.sigmoid(out.logits).double().cpu().numpy()
    deltas = out.deltas.double().cpu().numpy()
    deltas[:, 3] = np.clip(deltas[:, 3], -LOG_SIZE_DELTA_LIMIT, LOG_SIZE_DELTA_LIMIT)
    refined = []
    for i, prop in enumerate(proposals):
        box = decode_boxes(deltas[i : i + 1], prop.box.as_array()[None, :])[0]
        score = float(probs[i])
        if config.score_fusion == "geometric_mean":
            score = float(np.sqrt(score * prop.score))
        refined.append(Detection(Box3.from_array(box), score, Stage.REFINED, source=prop))
    return nms(refined, config.nms_iou)


def detect(
    sample: VolumeSample, model: NoduleNet, config: InferenceConfig = InferenceConfig()
) -> ScanResult:
    """Full two-stage detection with a single feature-extractor pass."""
    if not getattr(model, "initialized", False):
        raise ModelStateError(
            "model has no trained or seeded weights; build it via build_network "
            "or load_checkpoint before running detection"
        )
    side = model.config.input_side
    if sample.volume.shape != (side, side, side):
        raise ValueError(f"volume shape {sample.volume.shape} incompatible with model side {side}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            features = model.forward_features(sample.volume)
            proposals = _propose(model, features, config)
            detections = _refine(model, features, proposals, config)
    finally:
        if was_training:
            model.train()
    return ScanResult(sample.sample_id, detections, proposals)


def _detect_two_pass(
    sample: VolumeSample, model: NoduleNet, config: InferenceConfig
) -> ScanResult:
    """Baseline that re-extracts features from an input crop per proposal.

    Simulates running the two stages as separate networks: one full pass
    for proposals, then one fresh extractor pass on a proposal-centered
    crop for every candidate.
    """
    side = model.config.input_side
    volume = sample.volume
    model.eval()
    with torch.no_grad():
        features = model.forward_features(volume)
        proposals = _propose(model, features, config)
        refined = []
        for prop in proposals:
            origin = [
                int(min(max(round(c - side / 2.0), 0), volume.shape[ax] - side))
                for ax, c in enumerate((prop.box.z, prop.box.y, prop.box.x))
            ]
            crop = volume[
                origin[0] : origin[0] + side,
                origin[1] : origin[1] + side,
                origin[2] : origin[2] + side,
            ]
            local = Box3(
                prop.box.z - origin[0], prop.box.y - origin[1], prop.box.x - origin[2], prop.box.d
            )
            crop_features = model.forward_features(np.ascontiguousarray(crop))
            out = model.forward_fpr(crop_features, [local])
            prob = float(torch.sigmoid(out.logits[0]))
            delta = out.deltas[0].double().cpu().numpy()
            delta[3] = min(max(delta[3], -LOG_SIZE_DELTA_LIMIT), LOG_SIZE_DELTA_LIMIT)
            box = decode_boxes(delta[None, :], prop.box.as_array()[None, :])[0]
            score = prob
            if config.score_fusion == "geometric_mean":
                score = float(np.sqrt(score * prop.score))
            refined.append(Detection(Box3.from_array(box), score, Stage.REFINED, source=prop))
        detections = nms(refined, config.nms_iou)
    return ScanResult(sample.sample_id, detections, proposals)


def froc(
    results: Sequence[ScanResult],
    gt: Mapping[str, Sequence[Box3]],
    fp_rates: Sequence[float] = DEFAULT_FP_RATES,
    stage: Stage | str = Stage.REFINED,
) -> FrocCurve:
    """Free-response operating curve with greedy nodule claiming.

    The score threshold sweeps over every distinct detection score, highest
    first. Detections claim nodules greedily in canonical order (descending
    score, then scan order, then each result's own ordering): a detection
    hitting an unclaimed nodule claims the nearest one (ties to the lowest
    nodule index) and counts as a true positive; one hitting only claimed
    nodules is ignored; one hitting nothing is a false positive. The
    operating point at rate r takes the best sensitivity among sweep points
    with FPs/scan ≤ r (no interpolation), or 0 when none qualify.
    """
    stage = Stage(stage)
    missing = [r.sample_id for r in results if r.sample_id not in gt]
    if missing:
        raise ValueError(f"results without ground-truth entries: {missing}")
    total_nodules = sum(len(gt[r.sample_id]) for r in results)
    if total_nodules == 0:
        raise ValueError("sensitivity is undefined with zero ground-truth nodules")
    n_scans = len(results)

    entries = []  # (score, scan index, within-scan index, center)
    for si, result in enumerate(results):
        dets = result.detections if stage == Stage.REFINED else result.proposals
        for di, det in enumerate(dets):
            entries.append((det.score, si, di, (det.box.z, det.box.y, det.box.x)))
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))

    claimed: list[set[int]] = [set() for _ in results]
    nodules = [list(gt[r.sample_id]) for r in results]
    tp = 0
    fp = 0
    sweep: list[tuple[float, float, float]] = []
    i = 0
    while i < len(entries):
        threshold = entries[i][0]
        while i < len(entries) and entries[i][0] == threshold:
            _, si, _, center = entries[i]
            hits = [j for j, nod in enumerate(nodules[si]) if hit(center, nod)]
            if hits:
                free = [j for j in hits if j not in claimed[si]]
                if free:
                    best = min(
                        free,
                        key=lambda j: (
                            (center[0] - nodules[si][j].z) ** 2
                            + (center[1] - nodules[si][j].y) ** 2
                            + (center[2] - nodules[si][j].x) ** 2,
                            j,
                        ),
                    )
                    claimed[si].add(best)
                    tp += 1
                # hits on already-claimed nodules are ignored, not FPs
            else:
                fp += 1
            i += 1
        sweep.append((threshold, fp / n_scans, tp / total_nodules))

    points = []
    for rate in fp_rates:
        qualifying = [(s, f) for _, f, s in sweep if f <= rate]
        if qualifying:
            sens, fps = max(qualifying, key=lambda q: (q[0], -q[1]))
            points.append((fps, sens))
        else:
            points.append((0.0, 0.0))
    cpm = sum(s for _, s in points) / len(fp_rates)
    return FrocCurve(points, cpm, tuple(float(r) for r in fp_rates), sweep)


def evaluate_model(
    model: NoduleNet,
    samples: Sequence[VolumeSample],
    config: InferenceConfig = InferenceConfig(),
    stage: Stage | str = Stage.REFINED,
) -> tuple[FrocCurve, list[ScanResult]]:
    """Detect over a sample list and score the chosen stage against its gt.

    stage accepts the enum or its value string ("proposal"/"refined").
    """
    results = [detect(s, model, config) for s in samples]
    gt = {s.sample_id: s.nodules for s in samples}
    curve = froc(results, gt, fp_rates=config.fp_rates, stage=stage)
    return curve, results


def benchmark_inference(
    model: NoduleNet,
    volumes: Sequence[VolumeSample],
    mode: str = "shared",
    config: InferenceConfig = InferenceConfig(),
) -> tuple[float, int]:
    """Wall-clock seconds per scan and total extractor passes for one mode.

    "shared" is the production pipeline (one pass per scan); "two_pass"
    re-extracts features per proposal the way separate stage-one/stage-two
    networks would.
    """
    if mode not in ("shared", "two_pass"):
        raise ValueError("mode must be 'shared' or 'two_pass'")
    if len(volumes) < 10:
        raise ValueError("need at least 10 volumes for stable timing")
    run = detect if mode == "shared" else _detect_two_pass
    passes_before = model.backbone_passes
    start = time.perf_counter()
    for sample in volumes:
        run(sample, model, config)
    elapsed = time.perf_counter() - start
    return elapsed / len(volumes), model.backbone_passes - passes_before


def render_slices(result: ScanResult, sample: VolumeSample, out_dir) -> list[Path]:
    """Write one annotated axial-slice image per detection.

    Each image shows the volume slice through the detection center (clamped
    to a valid index) with the refined box solid, its source proposal
    dashed, any ground-truth boxes dotted, and both scores as text. Files
    are named "<sample>_det<i>_z<slice>.png". No detections, no files.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib import patches

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    side = sample.volume.shape[0]
    written = []
    for i, det in enumerate(result.detections):
        z = int(min(max(round(det.box.z), 0), side - 1))
        fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
        ax.imshow(sample.volume[z], cmap="gray", interpolation="nearest")
        for gt_box in sample.nodules:
            ax.add_patch(
                patches.Rectangle(
                    (gt_box.x - gt_box.d / 2, gt_box.y - gt_box.d / 2),
                    gt_box.d,
                    gt_box.d,
                    fill=False,
                    edgecolor="lime",
                    linestyle=":",
                    linewidth=1.2,
                )
            )
        if det.source is not None:
            p = det.source
            ax.add_patch(
                patches.Rectangle(
                    (p.box.x - p.box.d / 2, p.box.y - p.box.d / 2),
                    p.box.d,
                    p.box.d,
                    fill=False,
                    edgecolor="yellow",
                    linestyle="--",
                    linewidth=1.2,
                )
            )
            ax.text(
                p.box.x - p.box.d / 2,
                p.box.y - p.box.d / 2 - 1.5,
                f"prop {p.score:.2f}",
                color="yellow",
                fontsize=8,
            )
        ax.add_patch(
            patches.Rectangle(
                (det.box.x - det.box.d / 2, det.box.y - det.box.d / 2),
                det.box.d,
                det.box.d,
                fill=False,
                edgecolor="red",
                linewidth=1.2,
            )
        )
        ax.text(
            det.box.x - det.box.d / 2,
            det.box.y + det.box.d / 2 + 3.0,
            f"refined {det.score:.2f}",
            color="red",
            fontsize=8,
        )
        ax.set_title(f"{result.sample_id} z={z}", fontsize=9)
        ax.set_xlim(-0.5, side - 0.5)
        ax.set_ylim(side - 0.5, -0.5)
        path = out_dir / f"{result.sample_id}_det{i:03d}_z{z}.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def write_detections_csv(path, results: Sequence[ScanResult]) -> None:
    """Both stages of every result, one row per box: sample_id,z,y,x,d,score,stage."""
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "z", "y", "x", "d", "score", "stage"])
        for result in results:
            for det in list(result.detections) + list(result.proposals):
                b = det.box
                writer.writerow(
                    [result.sample_id, repr(b.z), repr(b.y), repr(b.x), repr(b.d), repr(det.score), det.stage.value]
                )


def read_detections_csv(path) -> dict[str, list[Detection]]:
    """Parse a detections CSV back into per-sample Detection lists."""
    import csv

    out: dict[str, list[Detection]] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        expected = ["sample_id", "z", "y", "x", "d", "score", "stage"]
        if header != expected:
            raise ValueError(f"{path}: bad header {header}, expected {expected}")
        for row in reader:
            if not row:
                continue
            box = Box3(float(row[1]), float(row[2]), float(row[3]), float(row[4]))
            det = Detection(box, float(row[5]), Stage(row[6]))
            out.setdefault(row[0], []).append(det)
    return out


def write_froc_report(path, curve: FrocCurve) -> None:
    """Plain-text operating-point table plus the mean sensitivity (CPM)."""
    lines = ["fps_per_scan_budget  achieved_fps  sensitivity"]
    for rate, (fps, sens) in zip(curve.fp_rates, curve.operating_points):
        lines.append(f"{rate:>19.3f}  {fps:>12.3f}  {sens:>11.4f}")
    lines.append(f"CPM (mean sensitivity over {len(curve.fp_rates)} rates): {curve.cpm:.4f}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_sweep_csv(path, curve: FrocCurve) -> None:
    """Machine-readable record of every threshold point on the curve."""
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "fps_per_scan", "sensitivity"])
        for threshold, fps, sens in curve.sweep:
            writer.writerow([repr(threshold), repr(fps), repr(sens)])
