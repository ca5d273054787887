"""Configuration management module for LatentMark."""

import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any

import yaml

from .attacks import AttackSpec, default_attacks
from .errors import ConfigError, ParameterError
from .losses import LossWeights
from .prior import is_unconditional
from .schedule import ScheduleKind, make_timesteps


class GradientMode(Enum):
    """Gradient path used during optimization."""
    ADJOINT = "adjoint"
    REFERENCE = "reference"


class AblationMode(Enum):
    """Which watermarks are injected and optimized."""
    DUAL = "dual"
    STRUCTURE_ONLY = "structure_only"
    DETAIL_ONLY = "detail_only"

    @property
    def uses_structure(self) -> bool:
        return self is not AblationMode.DETAIL_ONLY

    @property
    def uses_detail(self) -> bool:
        return self is not AblationMode.STRUCTURE_ONLY


@dataclass
class GridConfig:
    """Latent grid shape."""
    channels: int = 1
    height: int = 8
    width: int = 8

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass
class ScheduleConfig:
    """Noise schedule settings."""
    total_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    kind: ScheduleKind = ScheduleKind.LINEAR


@dataclass
class PriorConfig:
    """Gaussian-mixture prior settings."""
    components: int = 4
    variance: float = 0.25
    mean_scale: float = 1.0
    mean_smoothing: float = 1.0
    labels: list[str] = field(default_factory=lambda: ["a", "b", "a", "b"])
    weights: list[float] | None = None  # None = uniform
    seed: int = 7


@dataclass
class SamplerSettings:
    """Sampling grid, guidance and detail-step placement."""
    inference_steps: int = 20
    detail_step: int = 251
    guidance_scale: float = 2.0
    condition: str = "a"
    sigma_td: float = 0.1


@dataclass
class CodecConfig:
    """Extractor, carrier and detection settings."""
    bits: int = 16
    feature_dim: int = 256
    hidden_dim: int = 256
    extractor_seed: int = 11
    carrier_seed: int = 13
    corpus_size: int = 2048
    margin: float = 1.0
    fpr: float = 1e-6


@dataclass
class OptimizerConfig:
    """Adam and loop settings for watermark optimization."""
    iterations: int = 600
    learning_rate: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 50
    init_variance: float = 0.01
    gradient_method: GradientMode = GradientMode.ADJOINT
    mode: AblationMode = AblationMode.DUAL
    log_every: int = 100
    inversion_newton_steps: int = 2


@dataclass
class ExperimentConfig:
    """Main configuration dataclass for LatentMark."""
    grid: GridConfig = field(default_factory=GridConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    codec: CodecConfig = field(default_factory=CodecConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    attacks: list[AttackSpec] = field(default_factory=default_attacks)

    # Run settings
    images: int = 20
    output_dir: Path = field(default_factory=lambda: Path("runs/latest"))
    seed: int = 0
    workers: int = 1
    report_formats: list[str] = field(default_factory=lambda: ["csv", "json"])
    plots: bool = False


def load_config(config_path: Path | None) -> ExperimentConfig:
    """Load configuration from YAML or JSON file.

    Args:
        config_path: Path to configuration file (YAML or JSON), or None for defaults

    Returns:
        ExperimentConfig: Loaded configuration object

    Raises:
        FileNotFoundError: If config_path is provided but file doesn't exist
        ConfigError: If file format is invalid or unsupported
    """
    if config_path is None:
        return ExperimentConfig()

    config_path = Path(config_path)
    if not config_path.exists():
        raise FileNotFoundError(f"Configuration file not found: {config_path}")

    content = config_path.read_text()

    suffix = config_path.suffix.lower()
    if suffix in [".yaml", ".yml", ".cfg"]:
        try:
            data = yaml.safe_load(content)
        except yaml.YAMLError as e:
            raise ConfigError(f"Invalid YAML syntax: {e}") from e
    elif suffix == ".json":
        try:
            data = json.loads(content)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON syntax: {e}") from e
    else:
        raise ConfigError(f"Unsupported configuration file format: {suffix}")

    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("Configuration document must be a mapping")

    return config_from_dict(data)


def _section(cls: type, data: dict[str, Any], name: str) -> Any:
    """Builds one nested dataclass, rejecting unknown keys."""
    values = data.get(name) or {}
    if not isinstance(values, dict):
        raise ConfigError(f"'{name}' must be a mapping")
    known = set(cls.__dataclass_fields__)
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"Unknown key(s) in '{name}': {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ParameterError) as e:
        raise ConfigError(f"Invalid '{name}' section: {e}") from e


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    """Convert dictionary to ExperimentConfig object.

    Args:
        data: Dictionary with configuration values

    Returns:
        ExperimentConfig: Configuration object

    Raises:
        ConfigError: If a section holds unknown keys or invalid values
    """
    config = ExperimentConfig(
        grid=_section(GridConfig, data, "grid"),
        schedule=_section(ScheduleConfig, data, "schedule"),
        prior=_section(PriorConfig, data, "prior"),
        sampler=_section(SamplerSettings, data, "sampler"),
        codec=_section(CodecConfig, data, "codec"),
        weights=_section(LossWeights, data, "weights"),
        optimizer=_section(OptimizerConfig, data, "optimizer"),
    )

    try:
        config.schedule.kind = ScheduleKind(config.schedule.kind)
        config.optimizer.gradient_method = GradientMode(config.optimizer.gradient_method)
        config.optimizer.mode = AblationMode(config.optimizer.mode)
    except ValueError as e:
        raise ConfigError(str(e)) from e

    if "attacks" in data:
        try:
            config.attacks = [AttackSpec.from_dict(item) for item in data["attacks"] or []]
        except (ParameterError, TypeError, AttributeError) as e:
            raise ConfigError(f"Invalid attack entry: {e}") from e

    # Run settings
    if "images" in data:
        config.images = int(data["images"])
    if "output_dir" in data and data["output_dir"]:
        config.output_dir = Path(data["output_dir"])
    if "seed" in data:
        config.seed = int(data["seed"])
    if "workers" in data:
        config.workers = int(data["workers"])
    if "report_formats" in data:
        config.report_formats = [str(f) for f in data["report_formats"]]
    if "plots" in data:
        config.plots = bool(data["plots"])

    return config


def config_to_dict(config: ExperimentConfig) -> dict[str, Any]:
    """Canonical plain-dict snapshot (enums as values, paths as strings)."""
    return {
        "grid": asdict(config.grid),
        "schedule": {**asdict(config.schedule), "kind": config.schedule.kind.value},
        "prior": asdict(config.prior),
        "sampler": asdict(config.sampler),
        "codec": asdict(config.codec),
        "weights": asdict(config.weights),
        "optimizer": {
            **asdict(config.optimizer),
            "gradient_method": config.optimizer.gradient_method.value,
            "mode": config.optimizer.mode.value,
        },
        "attacks": [spec.to_dict() for spec in config.attacks],
        "images": config.images,
        "output_dir": str(config.output_dir),
        "seed": config.seed,
        "workers": config.workers,
        "report_formats": list(config.report_formats),
        "plots": config.plots,
    }


TEMPLATE = """# LatentMark Configuration
# Desk-scale watermark optimization on a Gaussian-mixture latent prior.

# Latent grid (channels, height, width)
grid:
  channels: 1
  height: 8
  width: 8

# Noise schedule
schedule:
  total_steps: 1000
  beta_start: 0.0001
  beta_end: 0.02
  kind: linear  # or scaled

# Mixture prior: one label per component
prior:
  components: 4
  variance: 0.25
  mean_scale: 1.0
  mean_smoothing: 1.0
  labels: [a, b, a, b]
  seed: 7

# Sampler: detail_step must lie on the grid and after the first step
sampler:
  inference_steps: 20
  detail_step: 251
  guidance_scale: 2.0
  condition: a  # or unconditional
  sigma_td: 0.1

# Message codec
codec:
  bits: 16
  feature_dim: 256
  hidden_dim: 256
  extractor_seed: 11
  carrier_seed: 13
  corpus_size: 2048
  margin: 1.0
  fpr: 1.0e-6

# Objective weights
weights:
  msg: 0.1
  init: 100.0
  low: 1000.0
  high: 100.0

# Optimizer
optimizer:
  iterations: 600
  learning_rate: 0.002
  beta1: 0.9
  beta2: 0.999
  eps: 1.0e-8
  patience: 50  # stop after this many zero message-loss iterations
  init_variance: 0.01
  gradient_method: adjoint  # or reference
  mode: dual  # or structure_only, detail_only
  log_every: 100
  inversion_newton_steps: 2

# Attack suite (params default per kind)
attacks:
  - {kind: none}
  - {kind: hflip}
  - {kind: rotate, params: {angle: 40}}
  - {kind: resize, params: {scale: 0.6}}
  - {kind: center_crop, params: {ratio: 0.6}}
  - {kind: gaussian_blur, params: {radius: 11}}
  - {kind: brightness, params: {factor: 0.5}}
  - {kind: contrast, params: {factor: 0.5}}
  - {kind: saturation, params: {factor: 1.5}}  # three-channel grids only
  - {kind: quantize, params: {bits: 6}}
  - {kind: random_erase, params: {ratio: 0.1}, seed: 1}
  - {kind: additive_noise, params: {std: 0.1}, seed: 2}
  - {kind: regenerate, params: {strength: 451}, seed: 3}

# Run settings
images: 20
output_dir: runs/latest
seed: 0
workers: 1
report_formats: [csv, json]
plots: false
"""


def create_template_config(output_path: Path) -> None:
    """Create a template configuration file with documented options.

    Args:
        output_path: Path where template configuration will be written
    """
    Path(output_path).write_text(TEMPLATE)


def merge_with_cli_args(config: ExperimentConfig, cli_args: dict[str, Any]) -> ExperimentConfig:
    """Merge configuration with command-line arguments.

    Command-line arguments take precedence over configuration file settings.

    Args:
        config: Base configuration object
        cli_args: Dictionary of command-line arguments

    Returns:
        ExperimentConfig: Merged configuration object
    """
    merged = config_from_dict(config_to_dict(config))

    if cli_args.get("seed") is not None:
        merged.seed = int(cli_args["seed"])
    if cli_args.get("out") is not None:
        merged.output_dir = Path(cli_args["out"])
    if cli_args.get("format") is not None:
        merged.report_formats = [cli_args["format"]]
    if cli_args.get("images") is not None:
        merged.images = int(cli_args["images"])
    if cli_args.get("iterations") is not None:
        merged.optimizer.iterations = int(cli_args["iterations"])
    if cli_args.get("workers") is not None:
        merged.workers = int(cli_args["workers"])
    if cli_args.get("mode") is not None:
        merged.optimizer.mode = AblationMode(cli_args["mode"])
    if cli_args.get("plots"):
        merged.plots = True

    return merged


def with_detail_step(config: ExperimentConfig, detail_step: int) -> ExperimentConfig:
    """Copy of the configuration with another detail-injection timestep."""
    merged = config_from_dict(config_to_dict(config))
    merged.sampler = replace(merged.sampler, detail_step=int(detail_step))
    return merged


def with_mode(config: ExperimentConfig, mode: AblationMode) -> ExperimentConfig:
    """Copy of the configuration with another ablation mode."""
    merged = config_from_dict(config_to_dict(config))
    merged.optimizer.mode = AblationMode(mode)
    return merged


def validate_config(config: ExperimentConfig) -> list[str]:
    """Validate configuration values.

    Args:
        config: Configuration object to validate

    Returns:
        list[str]: List of validation error messages (empty if valid)
    """
    errors = []

    # Grid and schedule
    if min(config.grid.shape) < 1:
        errors.append(f"grid dimensions must be positive, got {config.grid.shape}")
    if config.schedule.total_steps < 1:
        errors.append("schedule.total_steps must be >= 1")
    if not 0.0 < config.schedule.beta_start <= config.schedule.beta_end < 1.0:
        errors.append("schedule betas must satisfy 0 < beta_start <= beta_end < 1")

    # Prior
    if config.prior.components < 1:
        errors.append("prior.components must be >= 1")
    if len(config.prior.labels) != config.prior.components:
        errors.append(
            f"prior.labels has {len(config.prior.labels)} entries for {config.prior.components} components"
        )
    if config.prior.weights is not None and len(config.prior.weights) != config.prior.components:
        errors.append("prior.weights must have one entry per component")
    if config.prior.variance <= 0:
        errors.append("prior.variance must be positive")

    # Sampler grid
    steps = config.sampler.inference_steps
    if not 1 <= steps <= config.schedule.total_steps:
        errors.append(f"sampler.inference_steps must be in [1, {config.schedule.total_steps}], got {steps}")
    else:
        grid = make_timesteps(config.schedule.total_steps, steps)
        if config.optimizer.mode.uses_detail:
            if config.sampler.detail_step not in grid:
                errors.append(f"sampler.detail_step {config.sampler.detail_step} is not on the sampling grid")
            elif config.sampler.detail_step == grid[0]:
                errors.append("sampler.detail_step must come after the first sampling step")
    if config.sampler.guidance_scale < 0:
        errors.append("sampler.guidance_scale must be >= 0")
    if not is_unconditional(config.sampler.condition) and config.sampler.condition not in config.prior.labels:
        errors.append(f"sampler.condition '{config.sampler.condition}' matches no prior label")
    if config.sampler.sigma_td < 0:
        errors.append("sampler.sigma_td must be >= 0")

    # Codec
    if config.codec.bits < 1:
        errors.append("codec.bits must be >= 1")
    if config.codec.bits > config.codec.feature_dim:
        errors.append(f"codec.bits ({config.codec.bits}) must not exceed codec.feature_dim ({config.codec.feature_dim})")
    if not 0.0 < config.codec.fpr < 1.0:
        errors.append("codec.fpr must be in (0, 1)")
    if config.codec.margin < 0:
        errors.append("codec.margin must be >= 0")
    if config.codec.corpus_size < 2:
        errors.append("codec.corpus_size must be >= 2")

    # Optimizer
    if config.optimizer.iterations < 0:
        errors.append("optimizer.iterations must be >= 0")
    if config.optimizer.learning_rate <= 0:
        errors.append("optimizer.learning_rate must be positive")
    if config.optimizer.init_variance <= 0:
        errors.append("optimizer.init_variance must be positive")
    if config.optimizer.patience < 1:
        errors.append("optimizer.patience must be >= 1")

    # Run settings
    if config.images < 0:
        errors.append("images must be >= 0")
    if config.workers < 1:
        errors.append("workers must be >= 1")
    for fmt in config.report_formats:
        if fmt not in ["csv", "json"]:
            errors.append(f"report format must be 'csv' or 'json', got '{fmt}'")

    return errors
