"""Dissect a saved overfit checkpoint: per-scan proposals, refinements, misses."""
import sys

import numpy as np
import torch

from nodulekit.data import SyntheticConfig, generate_sample
from nodulekit.geometry import iou_matrix
from nodulekit.inference import InferenceConfig, detect, evaluate_model
from nodulekit.network import load_checkpoint

ckpt = sys.argv[1]
stage = sys.argv[2] if len(sys.argv) > 2 else "refined"
min_d = float(sys.argv[3]) if len(sys.argv) > 3 else None
model = load_checkpoint(ckpt)
synth = SyntheticConfig(diameter_range=(min_d, 24.0)) if min_d else SyntheticConfig()
samples = [generate_sample(synth, i) for i in range(8)]

curve, results = evaluate_model(model, samples, InferenceConfig(), stage=stage)
print(f"stage={stage} cpm={curve.cpm:.3f}")
print("operating points (fps/scan, sens):", [(round(f, 3), round(s, 3)) for f, s in curve.operating_points])
for sample, res in zip(samples, results):
    gts = sample.nodules
    dets = res.detections if stage == "refined" else res.proposals
    claimed = [False] * len(gts)
    lines = []
    for d in sorted(dets, key=lambda d: -d.score)[:8]:
        best_j, best_d2 = -1, None
        for j, n in enumerate(gts):
            d2 = (d.box.z - n.z) ** 2 + (d.box.y - n.y) ** 2 + (d.box.x - n.x) ** 2
            if d2 <= (n.d / 2.0) ** 2 and not claimed[j] and (best_d2 is None or d2 < best_d2):
                best_j, best_d2 = j, d2
        tag = "FP"
        if best_j >= 0:
            claimed[best_j] = True
            tag = f"hit g{best_j}"
        ious = iou_matrix(np.array([d.box.as_array()]), np.stack([g.as_array() for g in gts]))
        lines.append(
            f"    {d.score:.4f} {tag:7s} box=({d.box.z:5.1f},{d.box.y:5.1f},{d.box.x:5.1f},{d.box.d:4.1f})"
            f" maxIoU={ious.max():.2f}"
        )
    missed = [
        f"g{j}(d={g.d:.1f})" for j, g in enumerate(gts) if not claimed[j]
    ]
    print(f"--- {sample.sample_id} nodules={len(gts)} missed_by_top8={missed}")
    for ln in lines:
        print(ln)
