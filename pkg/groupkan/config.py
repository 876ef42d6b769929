"""Configuration schemas, presets and INI (de)serialization"""

import configparser
import enum
import logging
from typing import Dict, List, Mapping, Optional, Type

from pydantic import Field, root_validator
from pydantic.fields import SHAPE_SINGLETON

from .common import BaseModel
from .errors import ConfigurationError
from .spline import BaseActivation, SplineGrid

logger = logging.getLogger(__name__)

# Every input side must survive five 2x resolution changes.
RESOLUTION_MULTIPLE = 32

# Resolution used for FLOP reporting by default.
PROFILE_RESOLUTION = 512


@enum.unique
class GkaMode(str, enum.Enum):
    """How Grouped KAN Activation splines are shared within a group"""

    SHARED = "shared"  # one spline per group, shared by its channels
    PER_CHANNEL = "per_channel"  # one spline per channel, grouped for bookkeeping


@enum.unique
class TokenActivation(str, enum.Enum):
    """Nonlinearity applied to tokens right after patch embedding"""

    GKA = "gka"
    NONE = "none"
    RELU = "relu"
    GELU = "gelu"


@enum.unique
class TransformKind(str, enum.Enum):
    GKT = "gkt"
    MLP = "mlp"


@enum.unique
class ShapeKind(str, enum.Enum):
    DISK = "disk"
    ELLIPSE = "ellipse"
    BLOB_UNION = "blob_union"


@enum.unique
class ThresholdRule(str, enum.Enum):
    MEAN = "mean"
    OTSU = "otsu"


@enum.unique
class Preset(str, enum.Enum):
    TINY = "tiny"
    S = "s"
    BASE = "base"
    L = "l"


class GroupKanConfig(BaseModel):
    """Architecture hyperparameters of a GroupKAN network"""

    c1: int = Field(128, gt=0)
    c2: int = Field(160, gt=0)
    c3: int = Field(256, gt=0)
    gka_groups: int = Field(16, gt=0)
    gkt_groups: int = Field(16, gt=0)
    gkt_layers: int = Field(3, ge=1)
    grid: SplineGrid = SplineGrid()
    input_channels: int = Field(3, gt=0)
    num_classes: int = Field(1, gt=0)
    gka_mode: GkaMode = GkaMode.SHARED
    sigma: BaseActivation = BaseActivation.GELU
    base_activation: BaseActivation = BaseActivation.SILU
    token_activation: TokenActivation = TokenActivation.GKA
    # One entry per transform layer; None means all "gkt".
    layer_kinds: Optional[List[TransformKind]]
    gkt_spline: bool = True
    gkt_pwconv: bool = True
    gkt_dwconv: bool = True
    seed: int = Field(0, ge=0)

    @root_validator(skip_on_failure=True)
    @classmethod
    def validate_divisibility(cls, values: dict) -> dict:
        if values["c1"] % 8:
            raise ValueError(f"c1={values['c1']} must be divisible by 8")

        problems = []
        for channel_key in ("c2", "c3"):
            for group_key in ("gka_groups", "gkt_groups"):
                if values[channel_key] % values[group_key]:
                    problems.append(
                        f"{channel_key}={values[channel_key]} is not divisible by "
                        f"{group_key}={values[group_key]}"
                    )
        if problems:
            raise ValueError("; ".join(problems))

        kinds = values.get("layer_kinds")
        if kinds is not None and len(kinds) != values["gkt_layers"]:
            raise ValueError(
                f"layer_kinds has {len(kinds)} entries but gkt_layers={values['gkt_layers']}"
            )
        return values

    @property
    def transform_kinds(self) -> List[str]:
        if self.layer_kinds is None:
            return [TransformKind.GKT.value] * self.gkt_layers
        return list(self.layer_kinds)


class AugmentFlags(BaseModel):
    rotation: bool = True
    hflip: bool = True
    vflip: bool = True


class TrainPlan(BaseModel):
    """Optimization protocol"""

    epochs: int = Field(400, ge=1)
    batch_size: int = Field(8, ge=1)
    lr_start: float = Field(1e-4, gt=0)
    lr_end: float = Field(1e-5, gt=0)
    augment: AugmentFlags = AugmentFlags()
    seed: int = Field(0, ge=0)
    split_fraction: float = Field(0.8, gt=0, lt=1)

    @root_validator(skip_on_failure=True)
    @classmethod
    def validate_lr_order(cls, values: dict) -> dict:
        if values["lr_end"] > values["lr_start"]:
            raise ValueError("lr_end must not exceed lr_start")
        return values


class LossConfig(BaseModel):
    bce_weight: float = Field(0.5, ge=0)
    dice_weight: float = Field(0.5, ge=0)
    dice_smooth: float = Field(1.0, ge=0)

    @root_validator(skip_on_failure=True)
    @classmethod
    def validate_has_weight(cls, values: dict) -> dict:
        if values["bce_weight"] == 0 and values["dice_weight"] == 0:
            raise ValueError("bce_weight and dice_weight cannot both be zero")
        return values


class SyntheticSpec(BaseModel):
    """Generator settings for the built-in blob segmentation task"""

    count: int = Field(200, ge=1)
    resolution: int = Field(64, gt=0)
    shapes: List[ShapeKind] = [ShapeKind.DISK, ShapeKind.ELLIPSE, ShapeKind.BLOB_UNION]
    contrast: float = Field(0.6, gt=0, le=1)
    noise: float = Field(0.2, ge=0)
    channels: int = Field(3, gt=0)
    min_fraction: float = Field(0.05, gt=0, lt=1)
    max_fraction: float = Field(0.5, gt=0, lt=1)
    seed: int = Field(0, ge=0)

    @root_validator(skip_on_failure=True)
    @classmethod
    def validate_spec(cls, values: dict) -> dict:
        if values["resolution"] % RESOLUTION_MULTIPLE:
            raise ValueError(
                f"resolution={values['resolution']} must be a multiple of {RESOLUTION_MULTIPLE}"
            )
        if not values["shapes"]:
            raise ValueError("At least one shape kind is required")
        if values["min_fraction"] >= values["max_fraction"]:
            raise ValueError("min_fraction must be below max_fraction")
        return values


class DataConfig(BaseModel):
    synthetic: bool = False
    path: Optional[str]
    name: str = "dataset"
    threshold_rule: ThresholdRule = ThresholdRule.MEAN


class RunConfig(BaseModel):
    """Everything a CLI run needs; written next to its outputs"""

    model: GroupKanConfig = GroupKanConfig()
    train: TrainPlan = TrainPlan()
    loss: LossConfig = LossConfig()
    synthetic: SyntheticSpec = SyntheticSpec()
    data: DataConfig = DataConfig()
    out: str = "runs/groupkan"


PRESETS: Dict[str, dict] = {
    Preset.TINY.value: dict(c1=16, c2=16, c3=16, gka_groups=4, gkt_groups=4),
    Preset.S.value: dict(c1=64, c2=96, c3=128),
    Preset.BASE.value: dict(c1=128, c2=160, c3=256),
    Preset.L.value: dict(c1=256, c2=320, c3=512),
}


def preset_config(name: str, **overrides) -> GroupKanConfig:
    try:
        values = dict(PRESETS[Preset(name).value])
    except ValueError:
        raise ConfigurationError(
            f"Unknown preset {name!r}; expected one of {', '.join(PRESETS)}"
        ) from None
    values.update(overrides)
    return GroupKanConfig(**values)


# INI layout: one section per schema; nested schemas get their own section.
_SECTIONS: Dict[str, tuple] = {
    "model": ("model",),
    "grid": ("model", "grid"),
    "train": ("train",),
    "augment": ("train", "augment"),
    "loss": ("loss",),
    "synthetic": ("synthetic",),
    "data": ("data",),
    "run": (),
}


def _schema_at(path: tuple) -> Type[BaseModel]:
    schema: Type[BaseModel] = RunConfig
    for key in path:
        schema = schema.__fields__[key].type_
    return schema


def _nested_keys(schema: Type[BaseModel]) -> set:
    return {
        name
        for name, field in schema.__fields__.items()
        if isinstance(field.type_, type) and issubclass(field.type_, BaseModel)
    }


def _parse_value(schema: Type[BaseModel], key: str, raw: str):
    field = schema.__fields__[key]
    raw = raw.strip()
    if raw == "" and field.allow_none:
        return None
    if field.shape != SHAPE_SINGLETON:
        return [item.strip() for item in raw.split(",") if item.strip()]
    return raw


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (list, tuple)):
        return ",".join(str(item) for item in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def run_config_from_ini(text: str, overrides: Optional[Mapping[str, object]] = None) -> RunConfig:
    """Parse INI text, apply dotted-key overrides, and validate."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # type: ignore[assignment]
    parser.read_string(text)

    values: dict = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigurationError(f"Unknown config section [{section}]")
        path = _SECTIONS[section]
        schema = _schema_at(path)
        nested = _nested_keys(schema)
        target = values
        for key in path:
            target = target.setdefault(key, {})
        for key, raw in parser.items(section):
            if key not in schema.__fields__ or key in nested:
                raise ConfigurationError(f"Unknown config key {key!r} in section [{section}]")
            target[key] = _parse_value(schema, key, raw)

    return apply_overrides(RunConfig.parse_obj(values), overrides or {})


def load_run_config(path: Optional[str], overrides: Optional[Mapping[str, object]] = None):
    text = ""
    if path is not None:
        with open(path, encoding="utf8") as fp:
            text = fp.read()
    return run_config_from_ini(text, overrides)


def apply_overrides(config: RunConfig, overrides: Mapping[str, object]) -> RunConfig:
    """Return a copy of `config` with dotted keys (e.g. "train.epochs") replaced."""
    values = config.dict()
    for dotted, value in overrides.items():
        *parents, key = dotted.split(".")
        target = values
        schema: Type[BaseModel] = RunConfig
        for parent in parents:
            if parent not in schema.__fields__:
                raise ConfigurationError(f"Unknown config key {dotted!r}")
            schema = schema.__fields__[parent].type_
            target = target[parent]
        if key not in schema.__fields__:
            raise ConfigurationError(f"Unknown config key {dotted!r}")
        target[key] = _parse_value(schema, key, value) if isinstance(value, str) else value
    return RunConfig.parse_obj(values)


def dump_run_config(config: RunConfig) -> str:
    """Canonical INI text; `run_config_from_ini` of it reproduces `config`."""
    values = config.dict()
    lines: List[str] = []
    for section, path in _SECTIONS.items():
        schema = _schema_at(path)
        nested = _nested_keys(schema)
        section_values = values
        for key in path:
            section_values = section_values[key]
        lines.append(f"[{section}]")
        for key in schema.__fields__:
            if key in nested:
                continue
            lines.append(f"{key} = {_format_value(section_values[key])}")
        lines.append("")
    return "\n".join(lines)
