"""
Configuration models and the plain-text config file format.

This module defines every configuration record used by the pipeline:
- Enumerations for retention paradigms, mask kinds and sampling modes
- ModelConfig, TrainConfig, MaskSpec, SamplingPolicy
- Upsampler and bench settings
- PipelineConfig, which ties them together with file paths

Config files hold dotted `key = value` lines (`model.heads = 4`). They are read with
python-dotenv, nested on the dots and validated by pydantic.
"""

import enum
import io
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from retcomplete.errors import ConfigError, UsageError


class Paradigm(str, enum.Enum):
    """Computation form of the retention operator."""

    PARALLEL = "parallel"
    CHUNKWISE = "chunkwise"
    RECURRENT = "recurrent"


class MaskKind(str, enum.Enum):
    """Mask generators for training and evaluation."""

    CENTER = "center"
    HALF = "half"
    EXPAND = "expand"
    RANDOM_STROKE = "random_stroke"
    RANDOM_RECT = "random_rect"
    WIDE = "wide"
    NARROW = "narrow"


class SamplingMode(str, enum.Enum):
    TOP1 = "top1"
    TOPK = "topk"


class CompletionMode(str, enum.Enum):
    PIXELWISE = "pixelwise"
    SIMULTANEOUS = "simultaneous"


class ModelConfig(BaseModel):
    """
    Shape of a Bi-RetNet.

    Attributes:
        heads: Retention heads per layer (h)
        d_model: Embedding width (d), divisible by heads
        layers: Blocks per tower (N)
        side: Low-resolution image side (L)
        palette_size: Number of palette colors (k)
        ffn_mult: FFN hidden width as a multiple of d_model
        rope_base: Base of the rotation frequencies
        init_std: Std of the truncated-normal matrix init
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    heads: int = Field(default=4, ge=1)
    d_model: int = Field(default=64, ge=1)
    layers: int = Field(default=4, ge=0)
    side: int = Field(default=16, ge=1)
    palette_size: int = Field(default=32, ge=1)
    ffn_mult: int = Field(default=4, ge=1)
    rope_base: float = Field(default=10000.0, gt=1.0)
    init_std: float = Field(default=0.02, gt=0.0)

    @model_validator(mode="after")
    def validate_head_split(self) -> "ModelConfig":
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def seq_len(self) -> int:
        return self.side * self.side

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def celeba_scale(cls) -> "ModelConfig":
        return cls(heads=8, d_model=512, layers=30, side=48, palette_size=512)

    @classmethod
    def imagenet_scale(cls) -> "ModelConfig":
        return cls(heads=8, d_model=1024, layers=35, side=32, palette_size=512)


class TrainConfig(BaseModel):
    """
    Optimisation settings for the MLM objective.

    A zero learning rate is accepted and freezes every parameter.
    """

    model_config = ConfigDict(frozen=True, extra="forbid", use_enum_values=True)

    batch_size: int = Field(default=8, ge=1)
    lr: float = Field(default=3e-3, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.98, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    clip_norm: float = Field(default=1.0, gt=0.0)
    steps: int = Field(default=200, ge=0)
    mask_ratio_min: float = Field(default=0.2, gt=0.0, lt=1.0)
    mask_ratio_max: float = Field(default=0.7, gt=0.0, lt=1.0)
    paradigm: Paradigm = Paradigm.PARALLEL
    chunk: int = Field(default=16, ge=1)
    seed: int = 0
    checkpoint_every: int = Field(default=0, ge=0)
    log_every: int = Field(default=10, ge=1)

    @field_validator("paradigm")
    @classmethod
    def validate_paradigm(cls, v: Paradigm) -> Paradigm:
        if v == Paradigm.RECURRENT:
            raise ValueError("training supports the parallel and chunkwise paradigms only")
        return v

    @model_validator(mode="after")
    def validate_ratio_range(self) -> "TrainConfig":
        if self.mask_ratio_min > self.mask_ratio_max:
            raise ValueError("mask_ratio_min must not exceed mask_ratio_max")
        return self


class MaskSpec(BaseModel):
    """
    Mask generator parameters.

    Attributes:
        kind: Generator kind
        ratio: Target coverage for stroke and rectangle kinds
        region: Side of the central square (center/expand); defaults to L//2
        brush: Stroke radius in pixels; defaults depend on the kind
        seed: Seed of the generator
    """

    model_config = ConfigDict(frozen=True, extra="forbid", use_enum_values=True)

    kind: MaskKind = MaskKind.RANDOM_STROKE
    ratio: float = Field(default=0.5, gt=0.0, lt=1.0)
    region: Optional[int] = Field(default=None, ge=1)
    brush: Optional[int] = Field(default=None, ge=0)
    seed: int = 0


class SamplingPolicy(BaseModel):
    """How a color is drawn from a predicted distribution."""

    model_config = ConfigDict(frozen=True, extra="forbid", use_enum_values=True)

    mode: SamplingMode = SamplingMode.TOP1
    top_k: int = Field(default=1, ge=1)
    temperature: float = Field(default=1.0, gt=0.0)
    seed: int = 0

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "SamplingPolicy":
        """
        Parse the CLI form `top1` or `topk:K:T`.

        Raises:
            UsageError: If the text matches neither form
        """
        parts = text.strip().split(":")
        if parts == ["top1"]:
            return cls(seed=seed)
        if parts[0] == "topk" and len(parts) == 3:
            try:
                return cls(
                    mode=SamplingMode.TOPK,
                    top_k=int(parts[1]),
                    temperature=float(parts[2]),
                    seed=seed,
                )
            except ValueError as exc:
                raise UsageError(f"invalid sampling policy '{text}': {exc}") from exc
        raise UsageError(f"sampling policy must be 'top1' or 'topk:K:T', got '{text}'")

    def __str__(self) -> str:
        if self.mode == SamplingMode.TOP1:
            return "top1"
        return f"topk:{self.top_k}:{self.temperature}"


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class UpsamplerConfig(BaseModel):
    """Channel widths of the two encoder stages and the residual block count."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    widths: Tuple[int, int] = (32, 64)
    residual_blocks: int = Field(default=4, ge=0)
    init_std: float = Field(default=0.05, gt=0.0)

    @field_validator("widths", mode="before")
    @classmethod
    def split_widths(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("widths")
    @classmethod
    def validate_widths(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        if min(v) < 1:
            raise ValueError("channel widths must be positive")
        return v


class UpsamplerTrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    steps: int = Field(default=300, ge=0)
    lr: float = Field(default=2e-3, ge=0.0)
    batch_size: int = Field(default=2, ge=1)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.98, ge=0.0, lt=1.0)
    clip_norm: float = Field(default=1.0, gt=0.0)
    seed: int = 0


class BenchConfig(BaseModel):
    """
    Latency benchmark workload.

    Attributes:
        model: Shape of the (possibly random) model to time
        ratios: Mask ratios, at least one, each in [0, 1)
        reps: Timed repetitions per (method, ratio)
        warmup: Untimed repetitions before the timed ones
        mask_kind: Generator used for every ratio
        seed: Seed of the workload
    """

    model_config = ConfigDict(frozen=True, extra="forbid", use_enum_values=True)

    model: ModelConfig = ModelConfig(side=32)
    ratios: List[float] = Field(default_factory=lambda: [0.1, 0.25, 0.5, 0.75])
    reps: int = Field(default=9, ge=5)
    warmup: int = Field(default=1, ge=0)
    mask_kind: MaskKind = MaskKind.RANDOM_RECT
    seed: int = 0

    @field_validator("ratios", mode="before")
    @classmethod
    def split_ratios(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("ratios")
    @classmethod
    def validate_ratios(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("at least one mask ratio is required")
        for ratio in v:
            if ratio < 0.0 or ratio >= 1.0:
                raise ValueError(f"mask ratio {ratio} outside [0, 1)")
        return v


class PathsConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    data: Optional[Path] = None
    palette: Optional[Path] = None
    checkpoint: Optional[Path] = None
    out: Optional[Path] = None


class PipelineConfig(BaseModel):
    """Everything one pipeline run needs, as read from a config file."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = 0
    precision: int = 64
    paths: PathsConfig = PathsConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    mask: MaskSpec = MaskSpec()
    policy: SamplingPolicy = SamplingPolicy()
    upsampler: UpsamplerConfig = UpsamplerConfig()
    upsampler_train: UpsamplerTrainConfig = UpsamplerTrainConfig()
    bench: BenchConfig = BenchConfig()

    @field_validator("precision")
    @classmethod
    def validate_precision(cls, v: int) -> int:
        if v not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {v}")
        return v

    def check_paths(self) -> None:
        """
        Verify that every referenced input file exists.

        The output path is not checked; it is created on demand.

        Raises:
            ConfigError: Naming the first missing path
        """
        for name in ("data", "palette", "checkpoint"):
            path = getattr(self.paths, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"paths.{name} does not exist: {path}")


def _nest(flat: Dict[str, Optional[str]]) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    for key, value in flat.items():
        if value is None or value == "":
            continue
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"config key '{key}' conflicts with a scalar value")
            node = child
        node[parts[-1]] = value
    return tree


def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, Path):
        return str(value)
    return str(value)


def _flatten(model: BaseModel, prefix: str = "") -> List[Tuple[str, str]]:
    lines: List[Tuple[str, str]] = []
    for name in type(model).model_fields:
        value = getattr(model, name)
        key = f"{prefix}{name}"
        if isinstance(value, BaseModel):
            lines.extend(_flatten(value, prefix=f"{key}."))
        else:
            lines.append((key, _format_value(value)))
    return lines


def serialize_config(config: PipelineConfig) -> str:
    """Render the canonical `key = value` text of a config."""
    return "".join(f"{key} = {value}\n" for key, value in _flatten(config))


def parse_config_text(text: str) -> PipelineConfig:
    """
    Parse config text.

    Raises:
        pydantic.ValidationError: On unknown keys or invalid values
    """
    return PipelineConfig.model_validate(_nest(dotenv_values(stream=io.StringIO(text))))


def parse_config(path: Union[str, Path]) -> PipelineConfig:
    """
    Read and validate a config file.

    Raises:
        ConfigError: If the file cannot be read
        pydantic.ValidationError: On unknown keys or invalid values
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text)


def save_config(config: PipelineConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.write_text(serialize_config(config), encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot write config file {path}: {exc}") from exc
    return path
