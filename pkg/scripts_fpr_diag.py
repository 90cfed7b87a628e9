"""Inspect refinement-head behavior on the training volumes after an overfit run."""
import json
import sys

import numpy as np
import torch

from nodulekit.data import SyntheticConfig, generate_sample
from nodulekit.inference import InferenceConfig, detect
from nodulekit.network import NetworkConfig
from nodulekit.trainer import TrainConfig, train

kwargs = json.loads(sys.argv[1]) if len(sys.argv) > 1 else {}
out_dir = kwargs.pop("out_dir", None)
min_d = kwargs.pop("min_diameter", None)
synth = SyntheticConfig(diameter_range=(min_d, 24.0)) if min_d else SyntheticConfig()
samples = [generate_sample(synth, i) for i in range(8)]
state = train(samples, TrainConfig(**kwargs), NetworkConfig(), out_dir=out_dir)
for rec in state.metrics_log:
    if rec["kind"] == "epoch":
        print(
            f'ep {rec["epoch"]:2d} stage {rec["val_stage"]:8s} cpm {rec["val_cpm"]:.3f}',
            flush=True,
        )
print(f"best_cpm={state.best_cpm:.3f} best_epoch={state.best_epoch}")

model = state.model
model.eval()
cfg = InferenceConfig()
for sample in samples:
    res = detect(sample, model, cfg)
    print(f"--- {sample.sample_id}  gt={[(round(b.z,1), round(b.y,1), round(b.x,1), round(b.d,1)) for b in sample.nodules]}")
    with torch.no_grad():
        feats = model.forward_features(sample.volume)
        out = model.forward_fpr(feats, list(sample.nodules))
        gt_probs = torch.sigmoid(out.logits).numpy()
    print(f"    fpr prob on exact gt boxes: {np.round(gt_probs, 3)}")
    for det in res.detections[:6]:
        src = det.source.score if det.source else None
        hit = any(
            (det.box.z - n.z) ** 2 + (det.box.y - n.y) ** 2 + (det.box.x - n.x) ** 2
            <= (n.d / 2.0) ** 2
            for n in sample.nodules
        )
        print(
            f"    det score={det.score:.3f} src_prob={src:.3f} hit={hit} "
            f"box=({det.box.z:.1f},{det.box.y:.1f},{det.box.x:.1f},{det.box.d:.1f})"
        )
    for prop in res.proposals[:4]:
        hit = any(
            (prop.box.z - n.z) ** 2 + (prop.box.y - n.y) ** 2 + (prop.box.x - n.x) ** 2
            <= (n.d / 2.0) ** 2
            for n in sample.nodules
        )
        print(
            f"    prop score={prop.score:.3f} hit={hit} "
            f"box=({prop.box.z:.1f},{prop.box.y:.1f},{prop.box.x:.1f},{prop.box.d:.1f})"
        )
