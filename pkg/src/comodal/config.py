"""Experiment configuration: JSON schema, validation and defaults."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

__all__ = [
    "ExperimentConfig",
    "ModalityConfig",
    "MultimodalConfig",
    "LossWeights",
    "TaskConfig",
    "OptimizerConfig",
    "DataConfig",
    "parse_config",
    "load_config_dict",
    "default_config",
    "config_reference",
    "layer_shapes",
]

MODES = ("cotrain", "no_mm", "frozen_shared_mm", "no_kt", "mm_only")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Conv1dSpec(_Strict):
    """Temporal convolution over a [C, T] feature map."""

    kind: Literal["conv1d"] = "conv1d"
    channels: int = Field(gt=0)
    kernel: int = Field(3, gt=0)
    stride: int = Field(1, gt=0)
    padding: Optional[int] = Field(None, ge=0, description="defaults to kernel // 2")
    activation: Literal["relu", "tanh", "none"] = "relu"


class PointwiseSpec(_Strict):
    """Per-position channel mixing; works on [C, T] and [C, T, H, W] maps."""

    kind: Literal["pointwise"] = "pointwise"
    channels: int = Field(gt=0)
    activation: Literal["relu", "tanh", "none"] = "relu"


class PoolSpatialSpec(_Strict):
    """Mean over the spatial axes of a [C, T, H, W] map."""

    kind: Literal["pool_spatial"] = "pool_spatial"


class AttentionSpec(_Strict):
    """Self-attention transformer block over temporal tokens."""

    kind: Literal["attention"] = "attention"
    heads: int = Field(1, gt=0)
    ffn_mult: int = Field(2, gt=0)


LayerSpec = Annotated[
    Union[Conv1dSpec, PointwiseSpec, PoolSpatialSpec, AttentionSpec], Field(discriminator="kind")
]


class ModalityConfig(_Strict):
    name: str = Field(pattern=r"^[a-z][a-z0-9_]*$")
    input_shape: list[int] = Field(min_length=2, max_length=4, description="[C, T] or [C, T, H, W]")
    layers: list[LayerSpec] = Field(min_length=1)
    attach_after: int = Field(1, ge=1, description="number of leading layers shared with the multimodal branch")
    noise: float = Field(1.0, ge=0.0, description="std of additive per-position noise in the synthetic view")
    latent_noise: float = Field(0.0, ge=0.0, description="std of per-example corruption of the latent this view sees")

    @model_validator(mode="after")
    def _check(self):
        if self.name == "mm":
            raise ValueError("modality name 'mm' is reserved")
        if len(self.input_shape) == 3 or any(n <= 0 for n in self.input_shape):
            raise ValueError(f"input_shape must be [C, T] or [C, T, H, W] of positive ints, got {self.input_shape}")
        if self.attach_after > len(self.layers):
            raise ValueError(f"attach_after={self.attach_after} exceeds {len(self.layers)} layers")
        return self


class MultimodalConfig(_Strict):
    d_model: int = Field(16, gt=0)
    heads: int = Field(1, gt=0)
    cross_depth: int = Field(1, ge=1)
    self_depth: int = Field(1, ge=0)
    ffn_mult: int = Field(2, gt=0)
    positional_encoding: bool = True
    project_tokens: bool = Field(True, description="learned token projection when stem width != d_model")


class LossWeights(_Strict):
    alpha: float = Field(1.0, ge=0.0, description="knowledge-transfer weight")
    beta: float = Field(1.0, ge=0.0, description="unimodal task weight")
    gamma: float = Field(1.0, ge=0.0, description="multimodal task weight")
    temperature: float = Field(5.0, gt=0.0)
    kt_mode: Literal["decision", "feature", "attention", "none"] = "decision"
    kt_through_stem: bool = Field(True, description="let KT gradients reach the shared stem")


class TaskConfig(_Strict):
    kind: Literal["classification", "regression"] = "classification"
    num_classes: int = Field(4, ge=2)

    @property
    def n_outputs(self) -> int:
        return self.num_classes if self.kind == "classification" else 1


class OptimizerConfig(_Strict):
    lr: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)


class DataConfig(_Strict):
    latent_dim: int = Field(8, gt=0)
    n_train: int = Field(256, gt=0)
    n_val: int = Field(256, gt=0)
    n_test: int = Field(2000, gt=0)
    view_gain: float = Field(1.0, gt=0.0, description="scale of the latent-to-view map before tanh")
    view_overlap: float = Field(0.3, ge=0.0, description="view weight on latent dims owned by other modalities")
    label_noise: float = Field(0.0, ge=0.0, description="label sampling temperature (0 = deterministic labels)")
    seed: Optional[int] = Field(None, description="data seed; defaults to the run seed")


class ExperimentConfig(_Strict):
    modalities: list[ModalityConfig] = Field(min_length=2)
    multimodal: MultimodalConfig = MultimodalConfig()
    loss: LossWeights = LossWeights()
    task: TaskConfig = TaskConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    data: DataConfig = DataConfig()
    epochs: int = Field(20, gt=0)
    batch_size: int = Field(32, gt=0)
    seed: int = 0
    mode: Literal["cotrain", "no_mm", "frozen_shared_mm", "no_kt", "mm_only"] = "cotrain"

    @model_validator(mode="after")
    def _check(self):
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate modality names {names}")
        if self.task.kind == "regression" and self.loss.kt_mode == "decision":
            raise ValueError("kt_mode 'decision' needs a classification task")
        for m in self.modalities:
            shapes = layer_shapes(m)
            stem_width = shapes[m.attach_after][0]
            if not self.multimodal.project_tokens and stem_width != self.multimodal.d_model:
                raise ValueError(
                    f"modality {m.name}: stem width {stem_width} != d_model {self.multimodal.d_model} "
                    "and project_tokens is off"
                )
        if self.multimodal.d_model % self.multimodal.heads:
            raise ValueError("multimodal.d_model must be divisible by multimodal.heads")
        return self

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.modalities]

    def modality(self, name: str) -> ModalityConfig:
        for m in self.modalities:
            if m.name == name:
                return m
        from .errors import ModalityLookupError

        raise ModalityLookupError(f"unknown modality {name!r}; have {self.names}")

    def with_updates(self, **changes) -> "ExperimentConfig":
        """Copy with top-level fields replaced; nested sections accept dicts of overrides."""
        data = self.model_dump()
        for key, value in changes.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            elif isinstance(value, BaseModel):
                data[key] = value.model_dump()
            else:
                data[key] = value
        return validate_config(data)


def layer_shapes(m: ModalityConfig) -> list[tuple[int, ...]]:
    """Per-example feature shape before each layer and after the last one."""
    shape = tuple(m.input_shape)
    out = [shape]
    for i, layer in enumerate(m.layers):
        where = f"modality {m.name} layer {i} ({layer.kind})"
        if isinstance(layer, PointwiseSpec):
            shape = (layer.channels, *shape[1:])
        elif isinstance(layer, PoolSpatialSpec):
            if len(shape) == 2:
                raise ValueError(f"{where}: no spatial axes to pool")
            shape = shape[:2]
        elif isinstance(layer, Conv1dSpec):
            if len(shape) != 2:
                raise ValueError(f"{where}: needs a [C, T] map, got {list(shape)}")
            pad = layer.kernel // 2 if layer.padding is None else layer.padding
            length = (shape[1] + 2 * pad - layer.kernel) // layer.stride + 1
            if length < 1:
                raise ValueError(f"{where}: sequence of length {shape[1]} too short for kernel {layer.kernel}")
            shape = (layer.channels, length)
        elif isinstance(layer, AttentionSpec):
            if len(shape) != 2:
                raise ValueError(f"{where}: needs a [C, T] map, got {list(shape)}")
            if shape[0] % layer.heads:
                raise ValueError(f"{where}: width {shape[0]} not divisible by {layer.heads} heads")
        out.append(shape)
    return out


def _format_error(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"]
        if e["type"] == "extra_forbidden":
            msg = "unknown key"
        parts.append(f"{loc}: {msg}")
    return "; ".join(parts)


def validate_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_error(err)) from None


def load_config_dict(data: dict) -> ExperimentConfig:
    return validate_config(data)


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return validate_config(data)


def default_config(**changes) -> ExperimentConfig:
    """The default two-modality synthetic classification task.

    ``rgb`` carries a [C, T, H, W] map pooled spatially into tokens, ``audio``
    a [C, T] sequence. The data settings are tuned so that each view alone is
    clearly weaker than the fused pair, which leaves room for the multimodal
    branch to teach the unimodal ones.
    """
    base = {
        "epochs": 30,
        "loss": {"alpha": 3.0},
        "task": {"num_classes": 10},
        "data": {"n_train": 500, "view_gain": 0.5},
        "modalities": [
            {
                "name": "rgb",
                "input_shape": [8, 8, 2, 2],
                "layers": [
                    {"kind": "pointwise", "channels": 16},
                    {"kind": "pool_spatial"},
                    {"kind": "conv1d", "channels": 16, "kernel": 3},
                ],
                "noise": 0.05,
            },
            {
                "name": "audio",
                "input_shape": [8, 8],
                "layers": [
                    {"kind": "conv1d", "channels": 16, "kernel": 3},
                    {"kind": "conv1d", "channels": 16, "kernel": 3},
                ],
                "noise": 0.05,
            },
        ],
    }
    cfg = validate_config(base)
    return cfg.with_updates(**changes) if changes else cfg


def config_reference() -> str:
    """Markdown table of every configurable key with its type and default."""
    lines = ["| key | type | default | notes |", "|---|---|---|---|"]

    def walk(model: type[BaseModel], prefix: str) -> None:
        for name, field in model.model_fields.items():
            key = f"{prefix}{name}"
            ann = field.annotation
            if isinstance(ann, type) and issubclass(ann, BaseModel):
                walk(ann, key + ".")
                continue
            default = "required" if field.is_required() else json.dumps(field.default)
            tname = getattr(ann, "__name__", None) or str(ann).replace("typing.", "")
            lines.append(f"| `{key}` | {tname} | {default} | {field.description or ''} |")

    walk(ExperimentConfig, "")
    for spec in (Conv1dSpec, PointwiseSpec, PoolSpatialSpec, AttentionSpec):
        walk(spec, f"modalities[].layers[kind={spec.model_fields['kind'].default}].")
    return "\n".join(lines)
