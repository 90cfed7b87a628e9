"""Shared 3D feature extractor with proposal and refinement heads.

One model, two read-outs: a fully-convolutional proposal head scores every
anchor, and a small fully-connected head re-scores pooled candidate regions
on the same feature volume. The feature extractor is therefore computed
once per volume; ``backbone_passes`` counts how often.

Thread-safety contract: forward passes on a model whose parameters are not
being mutated are safe to run concurrently; training steps require
exclusive access.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .anchors import AnchorSpec
from .geometry import Box3, clip_to_volume

__all__ = [
    "NetworkConfig",
    "RpnOutput",
    "FprOutput",
    "NoduleNet",
    "build_network",
    "roi_pool",
    "count_parameters",
    "save_checkpoint",
    "load_checkpoint",
    "config_mismatch_fields",
    "CheckpointError",
    "CHECKPOINT_MAGIC",
    "OPTIMIZER_MAGIC",
    "write_array_container",
    "read_array_container",
]

CHECKPOINT_MAGIC = b"NDCK"
OPTIMIZER_MAGIC = b"NDOP"
CONTAINER_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised when a checkpoint file is malformed or incompatible."""


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters.

    The extractor downsamples by 4 in total (stride-2 stem, then a 2x max
    pool between the residual stages), so ``input_side`` must be divisible
    by 4. ``stage_channels`` sets the width of the two residual stages.
    """

    input_side: int = 64
    stem_channels: int = 24
    stage_channels: tuple[int, int] = (24, 128)
    feature_channels: int = 128
    residual_blocks_per_stage: int = 2
    roi_pool_size: int = 4
    fpr_hidden_width: int = 256
    anchor_spec: AnchorSpec = field(default_factory=AnchorSpec)

    def __post_init__(self) -> None:
        if self.input_side <= 0 or self.input_side % 4 != 0:
            raise ValueError("input_side must be a positive multiple of 4")
        for name in ("stem_channels", "feature_channels", "roi_pool_size", "fpr_hidden_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.residual_blocks_per_stage < 1:
            raise ValueError("residual_blocks_per_stage must be at least 1")
        if len(self.stage_channels) != 2 or any(c < 1 for c in self.stage_channels):
            raise ValueError("stage_channels must be two positive widths")
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))

    @property
    def feature_side(self) -> int:
        return self.input_side // 4

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        s = self.feature_side
        return (s, s, s)

    @property
    def num_anchors(self) -> int:
        return self.feature_side**3 * len(self.anchor_spec.sizes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["anchor_spec"] = {"sizes": list(self.anchor_spec.sizes), "stride": self.anchor_spec.stride}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        spec = d.pop("anchor_spec", None)
        if spec is not None:
            d["anchor_spec"] = AnchorSpec(sizes=tuple(spec["sizes"]), stride=int(spec["stride"]))
        if "stage_channels" in d:
            d["stage_channels"] = tuple(d["stage_channels"])
        return cls(**d)


class RpnOutput(NamedTuple):
    """Per-anchor logits (N,) and regression offsets (N, 4), anchor-ordered."""

    logits: torch.Tensor
    deltas: torch.Tensor


class FprOutput(NamedTuple):
    """Per-proposal logits (K,) and regression offsets (K, 4)."""

    logits: torch.Tensor
    deltas: torch.Tensor


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(cout)
        if cin != cout:
            self.shortcut: nn.Module = nn.Sequential(
                nn.Conv3d(cin, cout, 1, bias=False), nn.BatchNorm3d(cout)
            )
        else:
            self.shortcut = nn.Identity()
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class Backbone(nn.Module):
    """Stride-4 feature extractor: stem conv, residual stage, pool, residual stage."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        ca, cb = config.stage_channels
        self.stem = nn.Sequential(
            nn.Conv3d(1, config.stem_channels, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm3d(config.stem_channels),
            nn.ReLU(inplace=True),
        )
        stage_a = [ResidualBlock(config.stem_channels, ca)]
        stage_a += [ResidualBlock(ca, ca) for _ in range(config.residual_blocks_per_stage - 1)]
        self.stage_a = nn.Sequential(*stage_a)
        self.pool = nn.MaxPool3d(2)
        stage_b = [ResidualBlock(ca, cb)]
        stage_b += [ResidualBlock(cb, cb) for _ in range(config.residual_blocks_per_stage - 1)]
        self.stage_b = nn.Sequential(*stage_b)
        self.proj = nn.Sequential(
            nn.Conv3d(cb, config.feature_channels, 1, bias=False),
            nn.BatchNorm3d(config.feature_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.stage_b(self.pool(self.stage_a(self.stem(x)))))


class RpnHead(nn.Module):
    """1x1x1 convolution producing (logit, 4 offsets) per anchor size per cell."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.num_sizes = len(config.anchor_spec.sizes)
        self.conv = nn.Conv3d(config.feature_channels, self.num_sizes * 5, 1)

    def forward(self, features: torch.Tensor) -> RpnOutput:
        # (1, S*5, D, H, W) -> anchor-ordered rows: cell z-major, size fastest.
        out = self.conv(features.unsqueeze(0))
        _, _, d, h, w = out.shape
        out = out.view(self.num_sizes, 5, d, h, w).permute(2, 3, 4, 0, 1).reshape(-1, 5)
        return RpnOutput(logits=out[:, 0], deltas=out[:, 1:])


class FprHead(nn.Module):
    """Two fully-connected layers scoring one pooled region."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        in_features = config.feature_channels * config.roi_pool_size**3
        self.fc1 = nn.Linear(in_features, config.fpr_hidden_width)
        self.relu = nn.ReLU(inplace=True)
        self.fc2 = nn.Linear(config.fpr_hidden_width, 5)

    def forward(self, pooled: torch.Tensor) -> FprOutput:
        out = self.fc2(self.relu(self.fc1(pooled.flatten(start_dim=1))))
        return FprOutput(logits=out[:, 0], deltas=out[:, 1:])


def _bin_range(lo: float, hi: float, n_cells: int) -> tuple[int, int]:
    """Cells (centers at j + 0.5) covered by the half-open span [lo, hi)."""
    j0 = max(math.ceil(lo - 0.5), 0)
    j1 = min(math.ceil(hi - 0.5) - 1, n_cells - 1)
    if j0 > j1:
        # Empty bin: fall back to the cell containing the bin center.
        j = int(math.floor((lo + hi) / 2.0))
        j0 = j1 = min(max(j, 0), n_cells - 1)
    return j0, j1


def roi_pool(features: torch.Tensor, proposal: Box3, config: NetworkConfig) -> torch.Tensor:
    """Max-pool a proposal's feature region onto a fixed cubic grid.

    The proposal is clipped to the volume, mapped into feature coordinates
    by the extractor stride, and split into roi_pool_size^3 equal bins along
    each axis. Each bin takes the max over the feature cells whose centers
    fall inside it; an empty bin reads the single cell nearest its center.
    Gradients flow only to each bin's argmax cell.
    """
    if features.dim() != 4:
        raise ValueError("features must be a (C, D, H, W) tensor")
    box = clip_to_volume(proposal, config.input_side)
    stride = config.anchor_spec.stride
    p = config.roi_pool_size
    sizes = features.shape[1:]
    ranges = []
    for ax, c in enumerate((box.z, box.y, box.x)):
        lo = (c - box.d / 2.0) / stride
        width = box.d / stride
        ranges.append([_bin_range(lo + width * b / p, lo + width * (b + 1) / p, sizes[ax]) for b in range(p)])
    # Max over a product of per-axis cell ranges factors into nested
    # per-axis maxima, so pool one axis at a time: p slab-reductions per
    # axis instead of p^3 subcube reductions keeps the autograd graph small
    # enough to run wide proposal slates.
    pooled = features
    for ax in range(3):
        dim = ax + 1
        slabs = [
            pooled.narrow(dim, lo, hi - lo + 1).amax(dim=dim, keepdim=True)
            for lo, hi in ranges[ax]
        ]
        pooled = torch.cat(slabs, dim=dim)
    return pooled


class NoduleNet(nn.Module):
    """The full detector: shared extractor plus the two heads.

    Construct through build_network (or load_checkpoint) to get seeded,
    ready-to-use weights; a bare NoduleNet() is considered uninitialized.
    """

    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        self.config = config if config is not None else NetworkConfig()
        self.backbone = Backbone(self.config)
        self.rpn = RpnHead(self.config)
        self.fpr = FprHead(self.config)
        self.backbone_passes = 0
        self.initialized = False

    def forward_features(self, volume: torch.Tensor | np.ndarray) -> torch.Tensor:
        """Run the shared extractor; returns (C, S/4, S/4, S/4)."""
        if isinstance(volume, np.ndarray):
            volume = torch.from_numpy(np.ascontiguousarray(volume))
        dtype = next(self.parameters()).dtype
        volume = volume.to(dtype)
        s = self.config.input_side
        if volume.dim() == 3:
            volume = volume.view(1, 1, *volume.shape)
        elif volume.dim() == 4:
            volume = volume.unsqueeze(0)
        if volume.shape != (1, 1, s, s, s):
            raise ValueError(f"expected a volume of side {s}, got shape {tuple(volume.shape)}")
        self.backbone_passes += 1
        return self.backbone(volume)[0]

    def forward_rpn(self, features: torch.Tensor) -> RpnOutput:
        """Score every anchor from a feature volume."""
        return self.rpn(features)

    def forward_fpr(self, features: torch.Tensor, proposals: Sequence[Box3]) -> FprOutput:
        """Pool each proposal from the shared features and re-score it.

        Proposal coordinates are plain numbers, so no gradient flows through
        the region boundaries; features themselves stay differentiable.
        """
        if len(proposals) == 0:
            raise ValueError("forward_fpr requires at least one proposal")
        pooled = torch.stack([roi_pool(features, p, self.config) for p in proposals])
        return self.fpr(pooled)

    def forward(self, volume: torch.Tensor) -> RpnOutput:
        return self.forward_rpn(self.forward_features(volume))


def build_network(config: NetworkConfig, seed: int = 0) -> NoduleNet:
    """Create a NoduleNet with reproducible fan-in-scaled random init.

    The default torch init for conv and linear layers (Kaiming-uniform with
    fan-in scaling) is used; only the seed is pinned here. On top of that,
    both classification logits start from a low-probability prior bias:
    with tens of thousands of anchors and hard-negative mining touching only
    a handful per step, anchors the loss never visits would otherwise sit
    near probability 0.5 forever and drown the ranked output. The proposal
    head starts at prior 0.01; the refinement head, which sees a far milder
    class imbalance, starts at sigmoid(-2) ~= 0.12.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = NoduleNet(config)
    with torch.no_grad():
        num_sizes = len(config.anchor_spec.sizes)
        logit_rows = [s * 5 for s in range(num_sizes)]
        net.rpn.conv.bias[logit_rows] = -math.log(99.0)
        net.fpr.fc2.bias[0] = -2.0
    net.initialized = True
    return net


def count_parameters(config: NetworkConfig, mode: str = "shared") -> int:
    """Trainable parameter count for the detector.

    mode "shared" counts the actual model (one extractor feeding both
    heads); "duplicated" adds a second extractor copy, the cost of running
    the two stages as separate networks.
    """
    if mode not in ("shared", "duplicated"):
        raise ValueError("mode must be 'shared' or 'duplicated'")
    with torch.random.fork_rng():
        net = NoduleNet(config)
        total = sum(p.numel() for p in net.parameters())
        if mode == "duplicated":
            total += sum(p.numel() for p in net.backbone.parameters())
    return total


def config_mismatch_fields(a: NetworkConfig, b: NetworkConfig) -> list[str]:
    """Names of architecture fields on which two configs disagree."""
    da, db = a.to_dict(), b.to_dict()
    return sorted(k for k in da if da[k] != db[k])


# ---------------------------------------------------------------------------
# Binary array container: magic, version, JSON metadata, named float32 arrays.
# All integers little-endian u32. Shared by checkpoints and optimizer state.


def write_array_container(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<I", CONTAINER_VERSION))
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<I", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


class _Cursor:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def read(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"{self.path}: truncated while reading {what} at byte {self.pos} "
                f"(needed {n}, had {len(self.data) - self.pos})"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def read_u32(self, what: str) -> int:
        return struct.unpack("<I", self.read(4, what))[0]


def read_array_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        cur = _Cursor(f.read(), path)
    got = cur.read(4, "magic")
    if got != magic:
        raise CheckpointError(f"{path}: bad magic {got!r} at byte 0, expected {magic!r}")
    version = cur.read_u32("version")
    if version != CONTAINER_VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    meta_len = cur.read_u32("metadata length")
    try:
        meta = json.loads(cur.read(meta_len, "metadata").decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: invalid metadata JSON: {exc}") from exc
    n_arrays = cur.read_u32("array count")
    arrays: dict[str, np.ndarray] = {}
    for i in range(n_arrays):
        name_len = cur.read_u32(f"array {i} name length")
        name = cur.read(name_len, f"array {i} name").decode("utf-8")
        ndim = cur.read_u32(f"array {name!r} ndim")
        shape = struct.unpack(f"<{ndim}I", cur.read(4 * ndim, f"array {name!r} shape"))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = cur.read(4 * count, f"array {name!r} data")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if cur.pos != len(cur.data):
        raise CheckpointError(f"{path}: {len(cur.data) - cur.pos} trailing bytes after byte {cur.pos}")
    return meta, arrays


def _persisted_state(net: NoduleNet) -> dict[str, torch.Tensor]:
    # num_batches_tracked is a bookkeeping counter that never affects the
    # forward pass here (fixed-momentum batch norm); it is not persisted.
    return {k: v for k, v in net.state_dict().items() if not k.endswith("num_batches_tracked")}


def save_checkpoint(net: NoduleNet, path) -> None:
    """Write the model weights plus an echo of the architecture config."""
    arrays = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in _persisted_state(net).items()}
    write_array_container(path, CHECKPOINT_MAGIC, {"network": net.config.to_dict()}, arrays)


def load_checkpoint(path) -> NoduleNet:
    """Rebuild a model from a checkpoint, validating structure exactly."""
    meta, arrays = read_array_container(path, CHECKPOINT_MAGIC)
    if "network" not in meta:
        raise CheckpointError(f"{path}: metadata is missing the network config")
    try:
        config = NetworkConfig.from_dict(meta["network"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid network config: {exc}") from exc
    net = NoduleNet(config)
    expected = _persisted_state(net)
    missing = sorted(set(expected) - set(arrays))
    unexpected = sorted(set(arrays) - set(expected))
    if missing or unexpected:
        raise CheckpointError(f"{path}: array names do not match (missing {missing}, unexpected {unexpected})")
    state = {}
    for name, arr in arrays.items():
        want = tuple(expected[name].shape)
        if tuple(arr.shape) != want:
            raise CheckpointError(f"{path}: array {name!r} has shape {tuple(arr.shape)}, expected {want}")
        state[name] = torch.from_numpy(arr)
    net.load_state_dict(state, strict=False)
    net.initialized = True
    return net
