import numpy as np
import pytest

from nodulekit.anchors import AnchorSpec
from nodulekit.data import SyntheticConfig
from nodulekit.network import NetworkConfig

TINY_ANCHORS = AnchorSpec(sizes=(3.0, 5.0, 10.0), stride=4)


@pytest.fixture
def tiny_net_config():
    # Small enough that forward+backward stays under ~100ms on one core.
    return NetworkConfig(
        input_side=16,
        stem_channels=6,
        stage_channels=(6, 8),
        feature_channels=12,
        residual_blocks_per_stage=1,
        roi_pool_size=4,
        fpr_hidden_width=16,
        anchor_spec=TINY_ANCHORS,
    )


@pytest.fixture
def small_synth_config():
    return SyntheticConfig(
        volume_side=16,
        nodules_per_volume=(1, 2),
        diameter_range=(4.0, 8.0),
        distractor_count=(1, 2),
    )


def random_boxes(rng: np.random.Generator, n: int, side: float = 64.0, d_lo: float = 2.0, d_hi: float = 20.0):
    """(n, 4) array of boxes with centers in the volume and sides in [d_lo, d_hi]."""
    out = np.empty((n, 4), dtype=np.float64)
    out[:, :3] = rng.uniform(0.0, side, size=(n, 3))
    out[:, 3] = rng.uniform(d_lo, d_hi, size=n)
    return out
