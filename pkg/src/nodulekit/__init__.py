"""Desk-scale 3D nodule detection with a shared feature extractor."""

from .anchors import (
    AnchorGrid,
    AnchorLabels,
    AnchorSpec,
    assign_anchor_labels,
    assign_proposal_labels,
    build_anchor_grid,
    select_ohem_negatives,
)
from .config import RunConfig, load_run_config, to_toml
from .data import (
    SyntheticConfig,
    VolumeSample,
    augment,
    generate_sample,
    load_dataset,
    read_volume,
    split_dataset,
    write_volume,
)
from .geometry import (
    Box3,
    Detection,
    RegressionTarget,
    Stage,
    decode_box,
    encode_box,
    hit,
    iou,
    nms,
)
from .inference import (
    FrocCurve,
    InferenceConfig,
    ScanResult,
    benchmark_inference,
    detect,
    evaluate_model,
    froc,
    render_slices,
)
from .losses import LossConfig, joint_loss, stage_loss
from .network import (
    NetworkConfig,
    NoduleNet,
    build_network,
    count_parameters,
    load_checkpoint,
    roi_pool,
    save_checkpoint,
)
from .trainer import TrainConfig, TrainState, lr_at, sample_proposals_for_fpr, train

__version__ = "0.1.0"
