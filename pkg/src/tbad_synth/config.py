"""Configuration management for tbad-synth."""

import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from dotenv import load_dotenv

from .errors import ValidationError

load_dotenv()

# Training-set class sizes of the source CTA corpus (classes 1..5)
SOURCE_CLASS_COUNTS = [501, 387, 121, 13544, 3582]

# Desk-scale preset applied by ``RunConfig.smoke`` and ``--smoke``
SMOKE_OVERRIDES: Dict[str, Any] = {
    "train.epochs": 10,
    "train.batch_size": 8,
    "train.lr": 2e-3,
    "finetune.epochs": 10,
    "finetune.batch_size": 4,
    "finetune.lr": 1e-3,
}


@dataclass
class DataConfig:
    """Phantom dataset generation."""

    total: int = 200
    size: int = 64
    proportions: List[float] = field(default_factory=lambda: list(SOURCE_CLASS_COUNTS))
    min_per_class: int = 20
    split: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    noise_std: float = 0.03
    write_pgm: bool = True


@dataclass
class ArchConfig:
    """Denoiser architecture."""

    width: int = 16
    time_dim: int = 32
    embed_dim: int = 32
    hidden: int = 64
    template_grid: int = 16


@dataclass
class ScheduleConfig:
    """Discrete noise schedule."""

    kind: str = "linear"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class TrainConfig:
    """Optimization settings; defaults are the published fine-tuning values."""

    epochs: int = 100
    batch_size: int = 2
    lr: float = 1e-4
    opt_precision: str = "fp32"  # fp32 | q8
    weight_decay: float = 0.01
    lora: bool = False
    prior_lambda: float = 1.0
    cond_dropout: float = 0.1
    grad_clip: float = 1.0
    block_size: int = 64

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValidationError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.opt_precision not in ("fp32", "q8"):
            raise ValidationError(
                f"opt_precision must be fp32 or q8, got '{self.opt_precision}'"
            )
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValidationError(f"cond_dropout must be in [0, 1], got {self.cond_dropout}")


@dataclass
class LoraConfig:
    """Low-rank adapter fine-tuning on one under-represented class."""

    rank: int = 4
    alpha: float = 4.0
    subject_class: int = 3
    prior_per_class: int = 32
    prior_steps: int = 26
    prior_guidance: float = 4.0


@dataclass
class SamplerConfig:
    """Reverse-process sampling."""

    method: str = "euler"  # ddpm | euler | euler_a
    steps: int = 20
    guidance: float = 4.0
    token: int = 1
    neg_token: int = 0
    seed: int = 0
    rho: float = 7.0

    def validate(self) -> None:
        if self.method not in ("ddpm", "euler", "euler_a"):
            raise ValidationError(f"unknown sampler '{self.method}'")
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if self.guidance < 0:
            raise ValidationError(f"guidance must be >= 0, got {self.guidance}")
        for name in ("token", "neg_token"):
            value = getattr(self, name)
            if not 0 <= value <= 5:
                raise ValidationError(f"{name} must be in 0..5, got {value}")


@dataclass
class EvalConfig:
    """Fidelity and diversity evaluation."""

    samples_per_class: int = 20
    fid_n: int = 250
    msssim_pairs: int = 50
    encoder_epochs: int = 8
    encoder_lr: float = 3e-3
    encoder_batch: int = 16
    min_encoder_accuracy: float = 0.6


@dataclass
class TsneConfig:
    """Exact t-SNE."""

    perplexity: float = 30.0
    iterations: int = 500
    learning_rate: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    exaggeration: float = 12.0
    exaggeration_iters: int = 100
    dim: int = 2


@dataclass
class SegConfig:
    """Utility-probe segmentation network."""

    widths: Tuple[int, int, int] = (8, 16, 32)
    epochs: int = 15
    lr: float = 3e-3
    batch_size: int = 8
    detect_px: int = 25


@dataclass
class RunConfig:
    """Complete, serializable configuration of one pipeline run."""

    seed: int = 0
    out_dir: str = "./runs"
    run_id: str = ""
    precision: str = "fp32"  # fp32 | fp64 | fp16-store
    parallel_workers: int = 4
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=20, batch_size=2, lr=1e-3, lora=True)
    )
    lora: LoraConfig = field(default_factory=LoraConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    tsne: TsneConfig = field(default_factory=TsneConfig)
    seg: SegConfig = field(default_factory=SegConfig)

    @property
    def effective_run_id(self) -> str:
        return self.run_id or f"seed{self.seed}"

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.effective_run_id

    @property
    def workers(self) -> int:
        """Worker count, capped by the ``ADL_THREADS`` environment variable."""
        workers = max(1, self.parallel_workers)
        cap = os.getenv("ADL_THREADS")
        if cap:
            try:
                workers = min(workers, max(1, int(cap)))
            except ValueError:
                raise ValidationError(f"ADL_THREADS must be an integer, got '{cap}'")
        return workers

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization."""
        data = asdict(self)
        return _plain(data)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base: Optional["RunConfig"] = None) -> "RunConfig":
        """Create from dictionary, overlaid on ``base``; unknown keys are rejected."""
        return _build(cls, data or {}, "", base)

    @classmethod
    def smoke(cls, overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """Desk-scale preset: 200 phantoms, 10 base epochs."""
        cfg = cls()
        for key, value in {**SMOKE_OVERRIDES, **(overrides or {})}.items():
            set_dotted(cfg, key, value)
        return cfg


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls: type, data: Dict[str, Any], prefix: str, base: Any = None) -> Any:
    """Overlay ``data`` on ``base`` (or the class defaults), section by section."""
    base = base if base is not None else cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name in known:
        if name not in data:
            continue
        value = data[name]
        current = getattr(base, name)
        if is_dataclass(current):
            value = _build(type(current), value or {}, f"{prefix}{name}.", current)
        elif isinstance(current, tuple):
            value = tuple(value)
        kwargs[name] = value
    return replace(base, **kwargs)


def set_dotted(cfg: Any, key: str, value: Any) -> None:
    """Set ``section.field`` (or a top-level field) on a config object."""
    target = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise ValidationError(f"unknown config section '{part}' in '{key}'")
        target = getattr(target, part)
    if not hasattr(target, parts[-1]):
        raise ValidationError(f"unknown config key '{key}'")
    current = getattr(target, parts[-1])
    if isinstance(current, tuple) and isinstance(value, list):
        value = tuple(value)
    setattr(target, parts[-1], value)


class ConfigManager:
    """Manages configuration loading and saving."""

    def __init__(self, config_path: Optional[Path] = None):
        self.config_path = Path(config_path) if config_path else self._get_default_config_path()
        self._config: Optional[RunConfig] = None

    def _get_default_config_path(self) -> Path:
        """Default configuration file in the working directory."""
        return Path(os.getenv("TBAD_SYNTH_CONFIG", "tbad-synth.yaml"))

    def load(self) -> RunConfig:
        """Load configuration from file, falling back to defaults if absent."""
        if self._config is not None:
            return self._config

        if not self.config_path.exists():
            self._config = RunConfig()
            return self._config

        try:
            with open(self.config_path, "r") as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ValidationError(f"cannot parse {self.config_path}: {e}")
        # A stage manifest carries the complete config it ran with
        if "stage" in data and "config" in data:
            data = data["config"]
        self._config = RunConfig.from_dict(data)
        return self._config

    def save(self) -> None:
        """Save configuration to file."""
        if self._config is None:
            return
        self.config_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.config_path, "w") as f:
            yaml.safe_dump(self._config.to_dict(), f, default_flow_style=False, sort_keys=False)

    def update(self, **kwargs: Any) -> None:
        """Update configuration values; keys may be dotted (``train.epochs``)."""
        config = self.load()
        for key, value in kwargs.items():
            if value is not None:
                set_dotted(config, key.replace("__", "."), value)
        self.save()


# Global config manager instance
config_manager = ConfigManager()
