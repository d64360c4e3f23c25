"""
Configuration management for svtnet.

Loads and validates experiment configuration: nested YAML files
(config/svtnet.yaml) or flat `key = value` training config files.
"""

import dataclasses
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml


class ConfigError(Exception):
    """Configuration validation error."""
    pass


VARIANTS = ("svt", "asvt_only", "csvt_only")
VARIANT_ALIASES = {"svt": "svt", "asvt": "asvt_only", "csvt": "csvt_only"}
FUSIONS = ("add", "concat", "concat_conv")


@dataclass
class ModelConfig:
    """Network variant and dimensions."""

    variant: str = "svt"
    descriptor_dim: int = 256
    token_count: int = 8
    reduction: int = 8
    quant_step: float = 0.01
    stem_channels: Tuple[int, int] = (32, 64)
    fusion: str = "add"
    token_softmax_axis: str = "tokens"
    conv1x1_norm: bool = False

    @property
    def has_asvt(self) -> bool:
        return self.variant in ("svt", "asvt_only")

    @property
    def has_csvt(self) -> bool:
        return self.variant in ("svt", "csvt_only")

    @property
    def output_dim(self) -> int:
        """Descriptor length after fusion (concat doubles it)."""
        if self.variant == "svt" and self.fusion == "concat":
            return 2 * self.descriptor_dim
        return self.descriptor_dim

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}, got '{self.variant}'")
        if self.descriptor_dim <= 0:
            raise ConfigError(f"model.descriptor_dim must be > 0, got {self.descriptor_dim}")
        if self.token_count < 1:
            raise ConfigError(f"model.token_count must be >= 1, got {self.token_count}")
        if self.reduction < 1 or self.descriptor_dim % self.reduction:
            raise ConfigError(
                f"model.reduction {self.reduction} must divide descriptor_dim {self.descriptor_dim}"
            )
        if self.quant_step <= 0:
            raise ConfigError(f"model.quant_step must be > 0, got {self.quant_step}")
        if len(self.stem_channels) != 2 or min(self.stem_channels) < 1:
            raise ConfigError(
                f"model.stem_channels must be two positive ints: {self.stem_channels}"
            )
        if self.fusion not in FUSIONS:
            raise ConfigError(f"model.fusion must be one of {FUSIONS}, got '{self.fusion}'")
        if self.token_softmax_axis not in ("tokens", "voxels"):
            raise ConfigError(
                "model.token_softmax_axis must be 'tokens' or 'voxels', "
                f"got '{self.token_softmax_axis}'"
            )

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["stem_channels"] = list(self.stem_channels)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        config = _build(cls, "model", data)
        config.stem_channels = tuple(int(c) for c in config.stem_channels)
        config.variant = VARIANT_ALIASES.get(config.variant, config.variant)
        return config


TRAIN_PROFILES = {
    "baseline": {"epochs": 40, "lr_decay_epoch": 30, "batch_init": 32},
    "refined": {"epochs": 80, "lr_decay_epoch": 60, "batch_init": 16},
}


@dataclass
class TrainConfig:
    """Triplet training protocol."""

    profile: str = "baseline"
    epochs: int = 40
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_decay_epoch: int = 30
    margin: float = 0.2
    loss_reduction: str = "mean"
    batch_init: int = 32
    batch_max: int = 256
    batch_growth: float = 1.4
    batch_trigger: float = 0.7
    positive_radius: float = 10.0
    negative_radius: float = 50.0
    max_iterations: Optional[int] = None
    checkpoint_every: int = 1

    def validate(self) -> None:
        if self.profile not in TRAIN_PROFILES:
            raise ConfigError(f"training.profile must be one of {list(TRAIN_PROFILES)}")
        if self.epochs < 1:
            raise ConfigError(f"training.epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"training.lr must be > 0, got {self.lr}")
        if self.margin < 0:
            raise ConfigError(f"training.margin must be >= 0, got {self.margin}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError(f"training.loss_reduction must be 'mean' or 'sum'")
        if not 2 <= self.batch_init <= self.batch_max:
            raise ConfigError(
                f"training.batch_init must be in [2, batch_max], got {self.batch_init}"
            )
        if self.batch_growth <= 1.0:
            raise ConfigError(f"training.batch_growth must be > 1, got {self.batch_growth}")
        if not 0.0 < self.batch_trigger <= 1.0:
            raise ConfigError(f"training.batch_trigger must be in (0, 1]")
        if not 0 < self.positive_radius < self.negative_radius:
            raise ConfigError("training radii must satisfy 0 < positive_radius < negative_radius")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ConfigError(f"training.max_iterations must be >= 1")

    @classmethod
    def for_profile(cls, profile: str, **overrides) -> "TrainConfig":
        """Baseline or refined protocol, with optional overrides."""
        if profile not in TRAIN_PROFILES:
            raise ConfigError(f"Unknown training profile: {profile}")
        return cls(profile=profile, **{**TRAIN_PROFILES[profile], **overrides})


@dataclass
class AugmentConfig:
    """Training-time point-cloud augmentation; probabilities of 0 disable a step."""

    jitter_prob: float = 1.0
    jitter_sigma: float = 0.001
    jitter_clip: float = 0.002
    translate_prob: float = 1.0
    translate_max: float = 0.01
    removal_prob: float = 0.5
    removal_max_fraction: float = 0.1
    erase_prob: float = 0.5
    erase_max_fraction: float = 0.1

    def validate(self) -> None:
        for name in ("jitter_prob", "translate_prob", "removal_prob", "erase_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"augment.{name} must be in [0, 1], got {value}")
        for name in ("removal_max_fraction", "erase_max_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"augment.{name} must be in [0, 1), got {value}")
        if self.jitter_sigma < 0 or self.jitter_clip < 0 or self.translate_max < 0:
            raise ConfigError("augment magnitudes must be >= 0")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(jitter_prob=0.0, translate_prob=0.0, removal_prob=0.0, erase_prob=0.0)


@dataclass
class SynthConfig:
    """Synthetic scene set standing in for a benchmark dataset."""

    seed: int = 0
    scenes: int = 30
    copies: int = 3
    points: int = 4096
    spacing: float = 60.0
    boxes: int = 3
    cylinders: int = 2
    planes: int = 1
    copy_jitter: float = 0.002

    def validate(self) -> None:
        if self.scenes < 1:
            raise ConfigError(f"synth.scenes must be >= 1, got {self.scenes}")
        if self.copies < 2:
            raise ConfigError(f"synth.copies must be >= 2 (database + query), got {self.copies}")
        if self.points < 64:
            raise ConfigError(f"synth.points must be >= 64, got {self.points}")
        if self.spacing <= 0:
            raise ConfigError(f"synth.spacing must be > 0, got {self.spacing}")
        if min(self.boxes, self.cylinders, self.planes) < 0:
            raise ConfigError("synth primitive counts must be >= 0")
        if self.boxes + self.cylinders + self.planes == 0:
            raise ConfigError("synth needs at least one primitive per scene")


@dataclass
class EvalConfig:
    match_radius: float = 25.0
    curve_max_n: int = 25
    tag: str = "synthetic"

    def validate(self) -> None:
        if self.match_radius <= 0:
            raise ConfigError(f"eval.match_radius must be > 0, got {self.match_radius}")
        if self.curve_max_n < 1:
            raise ConfigError(f"eval.curve_max_n must be >= 1, got {self.curve_max_n}")


@dataclass
class LoggingConfig:
    level: str = "INFO"
    format: str = "structured"
    output: str = "logs/svtnet-{date}.log"
    console: bool = True

    def validate(self) -> None:
        if self.level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            raise ConfigError(f"logging.level is invalid: {self.level}")
        if self.format not in ("structured", "pretty"):
            raise ConfigError(f"logging.format must be 'structured' or 'pretty'")


@dataclass
class ExperimentConfig:
    """Complete experiment configuration."""

    seed: int = 0
    workers: int = 1
    output_dir: Path = Path("runs/default")
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    config_path: Optional[Path] = None

    def validate(self) -> None:
        """Validate entire configuration."""
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        for section in ("model", "training", "augment", "synth", "eval", "logging"):
            try:
                getattr(self, section).validate()
            except ConfigError as e:
                raise ConfigError(f"Section '{section}' validation failed: {e}")

    def get_log_file_path(self) -> Path:
        """Get log file path with date interpolation, relative to output_dir."""
        output = self.logging.output.replace("{date}", datetime.now().strftime("%Y-%m-%d"))
        path = Path(output)
        return path if path.is_absolute() else self.output_dir / path

    def get_state_file(self) -> Path:
        return self.get_log_file_path().parent / "state.json"

    def __repr__(self) -> str:
        return (
            f"ExperimentConfig(variant={self.model.variant}, seed={self.seed}, "
            f"output_dir={self.output_dir})"
        )


SECTIONS = {
    "model": ModelConfig,
    "training": TrainConfig,
    "augment": AugmentConfig,
    "synth": SynthConfig,
    "eval": EvalConfig,
    "logging": LoggingConfig,
}

# Flat training-config keys -> (section, field). Section None means top level.
FLAT_KEYS = {
    "seed": (None, "seed"),
    "workers": (None, "workers"),
    "output_dir": (None, "output_dir"),
    "variant": ("model", "variant"),
    "d": ("model", "descriptor_dim"),
    "L_t": ("model", "token_count"),
    "reduction": ("model", "reduction"),
    "quant_step": ("model", "quant_step"),
    "fusion": ("model", "fusion"),
    "schedule": ("training", "profile"),
    "epochs": ("training", "epochs"),
    "lr": ("training", "lr"),
    "lr_decay_epoch": ("training", "lr_decay_epoch"),
    "margin": ("training", "margin"),
    "batch_init": ("training", "batch_init"),
    "batch_max": ("training", "batch_max"),
    "max_iterations": ("training", "max_iterations"),
    "jitter": ("augment", "jitter_prob"),
    "translate": ("augment", "translate_prob"),
    "remove": ("augment", "removal_prob"),
    "erase": ("augment", "erase_prob"),
}


def _build(cls, section: str, data: Dict[str, Any]):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) in '{section}': {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"Invalid '{section}' section: {e}")


def _parse_flat(text: str, path: Path) -> Dict[str, Any]:
    """Parse `key = value` lines into nested sections; values are typed by YAML rules."""
    nested: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in FLAT_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
        section, name = FLAT_KEYS[key]
        try:
            parsed = yaml.safe_load(value) if value else None
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}:{lineno}: invalid value for '{key}': {e}")
        if section is None:
            nested[name] = parsed
        else:
            nested.setdefault(section, {})[name] = parsed

    # a schedule switch pulls in that profile's epochs/decay/batch unless set explicitly
    profile = nested.get("training", {}).get("profile")
    if profile in TRAIN_PROFILES:
        for k, v in TRAIN_PROFILES[profile].items():
            nested["training"].setdefault(k, v)
    return nested


def _load_raw(config_path: Path) -> Dict[str, Any]:
    """Load and parse a configuration file."""
    if not config_path.exists():
        raise ConfigError(f"Configuration file not found: {config_path}")

    text = config_path.read_text()
    if not text.strip():
        raise ConfigError("Configuration file is empty")

    if config_path.suffix in (".yaml", ".yml"):
        try:
            config = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"Invalid YAML syntax: {e}")
        if not isinstance(config, dict):
            raise ConfigError("Configuration file must contain a mapping")
        return config

    return _parse_flat(text, config_path)


def config_from_dict(raw: Dict[str, Any], config_path: Optional[Path] = None) -> ExperimentConfig:
    top_level = {"seed", "workers", "output_dir"}
    unknown = sorted(set(raw) - top_level - set(SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown top-level key(s): {', '.join(unknown)}")

    kwargs: Dict[str, Any] = {k: raw[k] for k in top_level if k in raw}
    if "output_dir" in kwargs:
        kwargs["output_dir"] = Path(kwargs["output_dir"])

    for section, cls in SECTIONS.items():
        data = raw.get(section) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"Section '{section}' must be a mapping")
        if section == "model":
            kwargs[section] = ModelConfig.from_dict(data)
        elif section == "training" and "profile" in data:
            base = TRAIN_PROFILES.get(data["profile"], {})
            kwargs[section] = _build(cls, section, {**base, **data})
        else:
            kwargs[section] = _build(cls, section, data)

    config = ExperimentConfig(config_path=config_path, **kwargs)
    config.validate()
    return config


def load_config(config_path: Optional[Path] = None) -> ExperimentConfig:
    """
    Load experiment configuration.

    Args:
        config_path: YAML or `key = value` file. Defaults to config/svtnet.yaml

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigError: If config is invalid or missing
    """
    if config_path is None:
        config_path = Path(__file__).parent.parent / "config" / "svtnet.yaml"

    config_path = Path(config_path)
    return config_from_dict(_load_raw(config_path), config_path)
