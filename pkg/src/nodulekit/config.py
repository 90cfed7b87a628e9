"""Unified run configuration: one TOML document covering every module.

Sections map one-to-one onto the per-module config dataclasses; every key
is optional and defaults to the dataclass default. The resolved config is
re-serialized into each run's output directory so any run can be repeated
from its own artifacts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .anchors import AnchorSpec
from .data import SyntheticConfig
from .inference import InferenceConfig
from .losses import LossConfig
from .network import NetworkConfig
from .trainer import TrainConfig

__all__ = ["ConfigError", "RunConfig", "read_toml", "run_config_from_dict", "load_run_config", "to_toml"]


class ConfigError(RuntimeError):
    """Raised on unparseable, unknown, or invalid configuration input."""


@dataclass
class RunConfig:
    """Everything a run needs, with the paths it was pointed at."""

    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    holdout_fraction: float = 0.25
    paths: dict[str, str] = field(default_factory=dict)


def read_toml(path) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _check_keys(section: str, data: Mapping[str, Any], allowed: set[str]) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"[{section}] has unknown keys: {', '.join(unknown)}")


def _build(section: str, cls, data: Mapping[str, Any], conversions: Mapping[str, Any]):
    _check_keys(section, data, {f.name for f in fields(cls)})
    kwargs = {}
    for key, value in data.items():
        convert = conversions.get(key)
        kwargs[key] = convert(value) if convert else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def _int_pair(v) -> tuple[int, int]:
    return (int(v[0]), int(v[1]))


def _float_pair(v) -> tuple[float, float]:
    return (float(v[0]), float(v[1]))


def _synthetic_from(data: Mapping[str, Any]) -> SyntheticConfig:
    return _build(
        "synthetic",
        SyntheticConfig,
        data,
        {
            "volume_side": int,
            "nodules_per_volume": _int_pair,
            "diameter_range": _float_pair,
            "noise_std": float,
            "distractor_count": _int_pair,
            "seed": int,
            "nodule_contrast": float,
            "distractor_contrast": float,
            "background_amplitude": float,
        },
    )


def _network_from(data: Mapping[str, Any]) -> NetworkConfig:
    data = dict(data)
    spec_data = data.pop("anchor_spec", None)
    spec = None
    if spec_data is not None:
        _check_keys("network.anchor_spec", spec_data, {"sizes", "stride"})
        try:
            spec = AnchorSpec(
                sizes=tuple(float(s) for s in spec_data.get("sizes", AnchorSpec().sizes)),
                stride=int(spec_data.get("stride", AnchorSpec().stride)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[network.anchor_spec]: {exc}") from exc
    conversions = {
        "input_side": int,
        "stem_channels": int,
        "stage_channels": _int_pair,
        "feature_channels": int,
        "residual_blocks_per_stage": int,
        "roi_pool_size": int,
        "fpr_hidden_width": int,
    }
    config = _build("network", NetworkConfig, data, conversions)
    if spec is not None:
        config = NetworkConfig.from_dict({**config.to_dict(), "anchor_spec": {"sizes": spec.sizes, "stride": spec.stride}})
    return config


def _train_from(data: Mapping[str, Any]) -> TrainConfig:
    return _build(
        "train",
        TrainConfig,
        data,
        {
            "phase1_epochs": int,
            "total_epochs": int,
            "lr_schedule": lambda v: tuple((int(e), float(lr)) for e, lr in v),
            "momentum": float,
            "weight_decay": float,
            "batch_size": int,
            "proposal_prob_threshold": float,
            "max_fpr_proposals": int,
            "fpr_loss_weight": float,
            "seed": int,
        },
    )


def _loss_from(data: Mapping[str, Any]) -> LossConfig:
    return _build(
        "loss",
        LossConfig,
        data,
        {"lambda_balance": float, "ohem_neg_per_pos": float, "ohem_min_neg": int},
    )


def _inference_from(data: Mapping[str, Any]) -> InferenceConfig:
    return _build(
        "inference",
        InferenceConfig,
        data,
        {
            "score_threshold": float,
            "nms_iou": float,
            "top_k": int,
            "fp_rates": lambda v: tuple(float(r) for r in v),
        },
    )


_SECTIONS = {
    "synthetic": _synthetic_from,
    "network": _network_from,
    "train": _train_from,
    "loss": _loss_from,
    "inference": _inference_from,
}


def run_config_from_dict(data: Mapping[str, Any]) -> RunConfig:
    """Build a RunConfig from a parsed TOML document, rejecting unknown keys."""
    allowed = set(_SECTIONS) | {"holdout_fraction", "paths"}
    _check_keys("top level", data, allowed)
    kwargs: dict[str, Any] = {}
    for name, builder in _SECTIONS.items():
        if name in data:
            if not isinstance(data[name], Mapping):
                raise ConfigError(f"[{name}] must be a table")
            kwargs[name] = builder(data[name])
    if "holdout_fraction" in data:
        frac = float(data["holdout_fraction"])
        if not 0.0 <= frac <= 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1]")
        kwargs["holdout_fraction"] = frac
    if "paths" in data:
        kwargs["paths"] = {str(k): str(v) for k, v in data["paths"].items()}
    return RunConfig(**kwargs)


def load_run_config(path=None) -> RunConfig:
    """Read a TOML config file, or return pure defaults when path is None."""
    if path is None:
        return RunConfig()
    return run_config_from_dict(read_toml(path))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value).__name__} to TOML")


def _emit_table(lines: list[str], name: str, data: Mapping[str, Any]) -> None:
    subtables = {k: v for k, v in data.items() if isinstance(v, Mapping)}
    scalars = {k: v for k, v in data.items() if not isinstance(v, Mapping)}
    if name:
        lines.append(f"[{name}]")
    for key, value in scalars.items():
        lines.append(f"{key} = {_format_value(value)}")
    lines.append("")
    for key, value in subtables.items():
        _emit_table(lines, f"{name}.{key}" if name else key, value)


def to_toml(config: RunConfig) -> str:
    """Serialize a RunConfig to TOML that load_run_config reads back equal."""
    doc: dict[str, Any] = {"holdout_fraction": config.holdout_fraction}
    doc["synthetic"] = asdict(config.synthetic)
    doc["network"] = config.network.to_dict()
    train = asdict(config.train)
    train["lr_schedule"] = [list(pair) for pair in config.train.lr_schedule]
    doc["train"] = train
    doc["loss"] = asdict(config.loss)
    doc["inference"] = asdict(config.inference)
    if config.paths:
        doc["paths"] = dict(config.paths)
    lines: list[str] = []
    _emit_table(lines, "", {"holdout_fraction": doc["holdout_fraction"]})
    for section in ("synthetic", "network", "train", "loss", "inference", "paths"):
        if section in doc:
            _emit_table(lines, section, doc[section])
    return "\n".join(lines).rstrip() + "\n"
