"""Run configuration.

Every section is a strict pydantic model: unknown keys are rejected so a typo
in a YAML file or a ``--set`` override fails loudly instead of being ignored.
Loss weights live only in :class:`LossConfig`; the matcher and the training
losses both read them from there.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelConfig(_Strict):
    num_stages: int = Field(3, ge=1)
    num_queries: int = Field(20, ge=1)
    hidden_dim: int = 256
    part_dim: int = 128
    num_heads: int = 8
    part_heads: int = 8
    dynamic_dim: int = 64
    # channel width of the part-attention conv tower (hidden_dim at full scale)
    part_conv_dim: int = 64
    box_pool_size: int = 7
    pose_pool_size: int = 14
    box_sampling_ratio: int = Field(2, ge=1)
    # pose bins are smaller than one P2 cell at desk scale, one sample suffices
    pose_sampling_ratio: int = Field(1, ge=1)
    num_keypoints: int = 17
    scheme: Literal["a", "b", "c", "d"] = "c"
    # optional explicit grouping, overrides ``scheme`` when given
    part_groups: Optional[list[list[int]]] = None
    iteration: Literal["serial", "box_only"] = "serial"
    part_update: Literal["gated", "replace", "sum"] = "gated"
    flow_mode: Literal["residual", "basic"] = "residual"
    flow_base: Literal["gaussian", "laplace"] = "gaussian"
    flow_layers: int = 4
    flow_hidden: int = 64
    detach_pose_boxes: bool = True
    prior_prob: float = 0.01
    pixel_mean: tuple[float, float, float] = (123.675, 116.28, 103.53)
    pixel_std: tuple[float, float, float] = (58.395, 57.12, 57.375)

    @model_validator(mode="after")
    def _check_dims(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.part_dim % self.part_heads:
            raise ValueError("part_dim must be divisible by part_heads")
        return self

    @property
    def num_parts(self) -> int:
        from .keypoint_decoder import part_division

        return len(part_division(self.scheme, self.part_groups, self.num_keypoints))

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Full-size setting: six stages, 100 queries, full-width part tower."""
        values = dict(num_stages=6, num_queries=100, part_conv_dim=256)
        values.update(overrides)
        return cls(**values)


class LossConfig(_Strict):
    cls_weight: float = 2.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    keypoint_weight: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # weight of an L1 keypoint term inside the matching cost; 0 disables it
    match_keypoint_weight: float = 0.0


class OptimConfig(_Strict):
    lr: float = 1e-4
    weight_decay: float = 1e-4
    clip_grad_norm: Optional[float] = 1.0
    flow_lr_mult: float = 10.0


class InferConfig(_Strict):
    score_threshold: float = 0.3
    top_k: int = 20


class SyntheticConfig(_Strict):
    image_size: tuple[int, int] = (256, 256)
    num_images: int = 20
    persons: tuple[int, int] = (1, 4)
    # figure height as a fraction of the image height
    scale: tuple[float, float] = (0.35, 0.7)
    occlusion_prob: float = 0.0
    clutter: int = 6
    seed: int = 0

    @field_validator("persons")
    @classmethod
    def _persons(cls, v):
        if v[0] < 1 or v[1] < v[0]:
            raise ValueError("persons must satisfy 1 <= min <= max")
        return v

    @field_validator("scale")
    @classmethod
    def _scale(cls, v):
        if not 0 < v[0] <= v[1]:
            raise ValueError("scale must satisfy 0 < min <= max")
        return v


class DataConfig(_Strict):
    source: Literal["synthetic", "coco"] = "synthetic"
    synthetic: SyntheticConfig = SyntheticConfig()
    annotations: Optional[str] = None
    image_root: Optional[str] = None


class TrainConfig(_Strict):
    steps: int = 2000
    batch_size: int = 4
    checkpoint_every: int = 500
    log_every: int = 10
    deterministic: bool = True


class RunConfig(_Strict):
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    optim: OptimConfig = OptimConfig()
    infer: InferConfig = InferConfig()
    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig()
    seed: int = 0
    tag: str = "run"


def _error_path(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def _parse_scalar(text: str) -> Any:
    return yaml.safe_load(text)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides (value parsed as YAML) to a nested dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        path = key.strip().split(".")
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {key!r}: {part!r} is not a section")
        node[path[-1]] = _parse_scalar(raw)
    return data


def load_config(path: Optional[str | Path] = None, overrides: Optional[list[str]] = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
    data = apply_overrides(data, list(overrides or []))
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid config: {_error_path(exc)}") from exc


def dump_config(cfg: BaseModel) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def parse_config_text(text: str, cls=RunConfig):
    try:
        return cls.model_validate(yaml.safe_load(text) or {})
    except ValidationError as exc:
        raise ConfigurationError(f"invalid config: {_error_path(exc)}") from exc
