"""Run configuration: model, training and data sections, YAML round-trip and overrides."""

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import yaml

from dcp.errors import ConfigError

BACKBONES = ("reference_large", "reference_small", "toy")
FUSION_STRATEGIES = ("activation_map", "tile_concat")
GUIDANCE_SHORT = ("f", "b", "alpha", "beta", "gamma", "delta")
DATASETS = ("synthetic", "pascal5i", "coco20i")


@dataclass
class ModelConfig:
    backbone: str = "reference_small"
    use_pds: bool = True
    enabled_guidance: tuple = GUIDANCE_SHORT
    fusion_strategy: str = "activation_map"
    channels: int = 256
    share_self_reasoning: bool = True
    pool_source: str = "mid"
    image_size: int = 64
    aspp_rates: tuple = (1, 2, 3)
    backbone_weights: Optional[str] = None
    backbone_seed: int = 0

    def __post_init__(self):
        self.enabled_guidance = tuple(self.enabled_guidance)
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)
        self.validate()

    def validate(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"model.backbone: unknown backbone {self.backbone!r} (choose from {BACKBONES})")
        if self.fusion_strategy not in FUSION_STRATEGIES:
            raise ConfigError(f"model.fusion_strategy: unknown strategy {self.fusion_strategy!r}")
        unknown = set(self.enabled_guidance) - set(GUIDANCE_SHORT)
        if unknown:
            raise ConfigError(f"model.enabled_guidance: unknown kinds {sorted(unknown)}")
        if len(set(self.enabled_guidance)) != len(self.enabled_guidance):
            raise ConfigError("model.enabled_guidance: duplicate entries")
        if self.channels <= 0:
            raise ConfigError("model.channels must be positive")
        if self.pool_source not in ("mid", "last"):
            raise ConfigError(f"model.pool_source: expected 'mid' or 'last', got {self.pool_source!r}")
        if self.image_size <= 0:
            raise ConfigError("model.image_size must be positive")
        if not self.aspp_rates or min(self.aspp_rates) <= 0:
            raise ConfigError("model.aspp_rates must be a non-empty list of positive ints")
        if self.fusion_strategy == "activation_map":
            if "f" not in self.enabled_guidance:
                raise ConfigError("model.enabled_guidance must include 'f' for activation-map fusion")
            if self.use_pds and "b" not in self.enabled_guidance:
                raise ConfigError("model.use_pds requires 'b' in model.enabled_guidance (background branch)")
        elif self.use_pds:
            raise ConfigError("model.use_pds is not available with fusion_strategy=tile_concat")

    def guidance_enabled(self, kind):
        return kind in self.enabled_guidance


@dataclass
class TrainConfig:
    lr: float = 0.005
    epochs: int = 200
    episodes_per_epoch: int = 100
    lambda1: float = 1.0
    lambda2: float = 1.0
    batch_episodes: int = 4
    seed: int = 0
    k_shot: int = 1
    momentum: float = 0.0
    weight_decay: float = 0.0
    checkpoint_every: int = 0
    log_every: int = 1
    augment: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.lr > 0:
            raise ConfigError("train.lr must be > 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("train.lambda1 and train.lambda2 must be >= 0")
        if self.epochs < 0 or self.episodes_per_epoch <= 0 or self.batch_episodes <= 0:
            raise ConfigError("train.epochs >= 0, train.episodes_per_epoch > 0 and train.batch_episodes > 0 required")
        if self.k_shot < 1:
            raise ConfigError("train.k_shot must be >= 1")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("train.momentum and train.weight_decay must be >= 0")

    @property
    def total_steps(self):
        per_epoch = -(-self.episodes_per_epoch // self.batch_episodes)
        return self.epochs * per_epoch


@dataclass
class DataConfig:
    dataset: str = "synthetic"
    fold: int = 0
    root: Optional[str] = None
    min_fg_area: Optional[int] = None
    synthetic_images_per_class: int = 60
    synthetic_seed: int = 0
    synthetic_companion_prob: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"data.dataset: unknown dataset {self.dataset!r}")
        if not 0 <= self.fold <= 3:
            raise ConfigError("data.fold must be in 0..3")
        if not 0.0 <= self.synthetic_companion_prob <= 1.0:
            raise ConfigError("data.synthetic_companion_prob must be in [0, 1]")
        if self.min_fg_area is not None and self.min_fg_area < 0:
            raise ConfigError("data.min_fg_area must be >= 0")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self):
        out = {}
        for name in ("model", "train", "data"):
            section = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def _field_types(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


def _coerce(cls, key, value):
    f = _field_types(cls)[key]
    default = f.default if f.default is not dataclasses.MISSING else None
    if isinstance(value, str):
        text = value
        if isinstance(default, bool):
            low = text.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        value = yaml.safe_load(text) if text.strip() else None
        if isinstance(default, tuple) and isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and not isinstance(default, bool):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
    return value


def _build(cls, section_name, values):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{section_name}: expected a mapping")
    known = _field_types(cls)
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {section_name}.{key}")
        kwargs[key] = _coerce(cls, key, value)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{section_name}: {exc}") from None


def config_from_dict(data):
    data = dict(data or {})
    for key in data:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config key {key}")
    return RunConfig(**{name: _build(cls, name, data.get(name)) for name, cls in _SECTIONS.items()})


def load_config(path=None, overrides=()):
    """Read a YAML config and apply ``section.key=value`` overrides."""
    data = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    data = {k: dict(v or {}) for k, v in data.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, value = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"unknown config key {dotted.strip()}")
        section, key = parts
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config key {dotted.strip()}")
        data.setdefault(section, {})[key] = value
    return config_from_dict(data)


def model_config_from_dict(values):
    return _build(ModelConfig, "model", values)
