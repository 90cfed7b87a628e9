"""Probe the desk-default overfit run used by the acceptance gate."""
import json
import sys
import time

from nodulekit.data import SyntheticConfig, generate_sample
from nodulekit.network import NetworkConfig
from nodulekit.trainer import TrainConfig, train

kwargs = json.loads(sys.argv[1]) if len(sys.argv) > 1 else {}
t0 = time.time()
samples = [generate_sample(SyntheticConfig(), i) for i in range(8)]

state = train(samples, TrainConfig(**kwargs), NetworkConfig())
for rec in state.metrics_log:
    if rec["kind"] == "epoch":
        print(
            f'ep {rec["epoch"]:2d} stage {rec["val_stage"]:8s} cpm {rec["val_cpm"]:.3f}',
            flush=True,
        )
print(f"best_cpm={state.best_cpm:.3f} best_epoch={state.best_epoch} total={time.time() - t0:.0f}s")
