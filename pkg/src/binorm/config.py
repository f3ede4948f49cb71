"""Configuration documents for binorm: model, training and run settings."""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, TypeVar

from binorm.errors import ConfigurationError

THREADS_ENV = "BINORM_THREADS"

# Channel ladder of the convolutional classifier, one entry per conv layer.
FULL_LADDER = (32, 32, 64, 64, 64, 64, 128, 128, 256, 256)
TINY_LADDER = (4, 4, 8, 8, 8, 8, 8, 8, 8, 8)

MODEL_KINDS = ("bcvnn", "blm")
OPTIMIZERS = ("adam", "adamw")


@dataclass
class ModelConfig:
    """Declarative description of one of the two architectures."""

    kind: str = "bcvnn"
    binary: bool = True

    # bcvnn
    filter_size: int = 3
    channels: list[int] = field(default_factory=lambda: list(FULL_LADDER))
    num_classes: int = 101
    input_channels: int = 3
    image_size: int = 256
    dense_units: int = 256
    dropout: list[float] = field(default_factory=lambda: [0.4, 0.3])

    # blm
    max_len: int = 256
    emb_dim: int = 768
    num_heads: int = 16
    num_blocks: int = 12
    ff_dim: int | None = None
    mlp_units_0: int = 4096
    mlp_units_1: int = 2048
    vocab_size: int = 30522

    @property
    def ff_units(self) -> int:
        """Feed-forward width of a transformer block (2 * emb_dim unless set)."""
        return self.ff_dim if self.ff_dim is not None else 2 * self.emb_dim

    def validate(self) -> "ModelConfig":
        """Check structural constraints.

        Returns:
            The config itself, for chaining.

        Raises:
            ConfigurationError: If the configuration cannot be built.
        """
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(
                f"Unknown model kind '{self.kind}'. Valid kinds: {', '.join(MODEL_KINDS)}"
            )

        if self.kind == "bcvnn":
            if self.filter_size < 1 or self.filter_size % 2 == 0:
                raise ConfigurationError(
                    f"filter_size must be odd and positive, got {self.filter_size}"
                )
            if len(self.channels) != len(FULL_LADDER):
                raise ConfigurationError(
                    f"channels must list {len(FULL_LADDER)} conv widths, got {len(self.channels)}"
                )
            if any(c < 1 for c in self.channels):
                raise ConfigurationError("channel widths must be positive")
            if self.num_classes < 2:
                raise ConfigurationError(
                    f"num_classes must be at least 2, got {self.num_classes}"
                )
            if self.image_size % 16 != 0:
                raise ConfigurationError(
                    f"image_size must be divisible by 16 (four 2x2 pools), got {self.image_size}"
                )
            if len(self.dropout) != 2 or not all(0.0 <= r < 1.0 for r in self.dropout):
                raise ConfigurationError("dropout must hold two rates in [0, 1)")
        else:
            if self.num_heads < 1 or self.emb_dim % self.num_heads != 0:
                raise ConfigurationError(
                    f"emb_dim ({self.emb_dim}) must be divisible by num_heads ({self.num_heads})"
                )
            if min(self.max_len, self.vocab_size, self.num_blocks + 1, self.ff_units) < 1:
                raise ConfigurationError("max_len, vocab_size and ff_dim must be positive")

        return self


@dataclass
class ScheduleConfig:
    """Linear warmup followed by cosine decay to a floor."""

    max_lr: float = 1e-4
    warmup_steps: int = 20
    decay_steps: int = 1100
    floor_lr: float | None = None

    @property
    def floor(self) -> float:
        return self.floor_lr if self.floor_lr is not None else self.max_lr / 100

    def validate(self) -> "ScheduleConfig":
        if self.warmup_steps < 0:
            raise ConfigurationError("warmup_steps must be >= 0")
        if self.decay_steps <= 0:
            raise ConfigurationError("decay_steps must be > 0")
        return self


@dataclass
class TrainConfig:
    """Training hyperparameters."""

    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    max_lr: float = 1e-4
    warmup_steps: int = 20
    decay_steps: int = 1100
    floor_lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    train_fraction: float = 0.95
    threads: int = 1

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(
            max_lr=self.max_lr,
            warmup_steps=self.warmup_steps,
            decay_steps=self.decay_steps,
            floor_lr=self.floor_lr,
        ).validate()

    def validate(self) -> "TrainConfig":
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(
                f"Unknown optimizer '{self.optimizer}'. Valid: {', '.join(OPTIMIZERS)}"
            )
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigurationError("train_fraction must be in (0, 1]")
        self.schedule()
        return self


@dataclass
class RunConfig:
    """Everything one CLI invocation needs."""

    command: str
    model_config: str | None = None
    data: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int | None = None
    out_dir: Path | None = None

    def validate(self) -> "RunConfig":
        """Check paths and mandatory fields before any work starts."""
        if self.command == "train" and self.seed is None:
            raise ConfigurationError("--seed is mandatory for train")
        if self.model_config is not None and self.model_config not in MODEL_PRESETS:
            if not Path(self.model_config).is_file():
                raise ConfigurationError(f"Config file does not exist: {self.model_config}")
        if self.data is not None and not self.data.startswith("synthetic:"):
            if not Path(self.data).is_file():
                raise ConfigurationError(f"Data file does not exist: {self.data}")
        if self.out_dir is not None:
            if self.out_dir.exists() and not self.out_dir.is_dir():
                raise ConfigurationError(f"Output path is not a directory: {self.out_dir}")
        self.train.validate()
        return self


MODEL_PRESETS: dict[str, ModelConfig] = {
    "bcvnn": ModelConfig(kind="bcvnn", filter_size=3),
    "bcvnn-f5": ModelConfig(kind="bcvnn", filter_size=5),
    "tiny-bcvnn": ModelConfig(
        kind="bcvnn",
        filter_size=3,
        channels=list(TINY_LADDER),
        num_classes=4,
        image_size=16,
        dense_units=32,
    ),
    "blm-small": ModelConfig(
        kind="blm",
        max_len=256,
        emb_dim=768,
        num_heads=16,
        num_blocks=12,
        mlp_units_0=4096,
        mlp_units_1=2048,
        vocab_size=30522,
    ),
    "blm-large": ModelConfig(
        kind="blm",
        max_len=256,
        emb_dim=1024,
        num_heads=16,
        num_blocks=16,
        mlp_units_0=8192,
        mlp_units_1=4096,
        vocab_size=30522,
    ),
    "tiny-blm": ModelConfig(
        kind="blm",
        max_len=16,
        emb_dim=64,
        num_heads=4,
        num_blocks=2,
        mlp_units_0=128,
        mlp_units_1=64,
        vocab_size=16,
    ),
}

TRAIN_PRESETS: dict[str, TrainConfig] = {
    "bcvnn": TrainConfig(
        epochs=1000, batch_size=64, optimizer="adam",
        max_lr=1e-4, warmup_steps=20, decay_steps=1100,
    ),
    "blm": TrainConfig(
        epochs=100, batch_size=64, optimizer="adamw",
        max_lr=1e-5, warmup_steps=0, decay_steps=1, floor_lr=1e-5,
    ),
    "tiny-bcvnn": TrainConfig(
        epochs=200, batch_size=32, optimizer="adam",
        max_lr=3e-3, warmup_steps=20, decay_steps=1500,
    ),
    "tiny-blm": TrainConfig(
        epochs=100, batch_size=32, optimizer="adamw",
        max_lr=3e-3, warmup_steps=20, decay_steps=1500,
    ),
}

C = TypeVar("C")


def _from_dict(cls: type[C], data: dict[str, Any], source: str) -> C:
    if not isinstance(data, dict):
        raise ConfigurationError(f"{source}: expected a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"{source}: unknown keys {', '.join(unknown)}")
    return cls(**data)


def model_config_from_dict(data: dict[str, Any], source: str = "config") -> ModelConfig:
    return _from_dict(ModelConfig, data, source).validate()


def model_config_to_dict(config: ModelConfig) -> dict[str, Any]:
    return asdict(config)


def load_model_config(source: str | Path) -> ModelConfig:
    """Load a model configuration.

    Args:
        source: A preset name (e.g. "tiny-blm") or a path to a JSON document.

    Returns:
        A validated ModelConfig.
    """
    key = str(source)
    if key in MODEL_PRESETS:
        return ModelConfig(**asdict(MODEL_PRESETS[key])).validate()

    return model_config_from_dict(_read_json(Path(source)), key)


def save_model_config(config: ModelConfig, path: Path) -> None:
    """Write a model configuration as JSON."""
    _write_json(path, model_config_to_dict(config))


def load_train_config(source: str | Path) -> TrainConfig:
    """Load a training configuration from a preset name or a JSON path."""
    key = str(source)
    if key in TRAIN_PRESETS:
        return TrainConfig(**asdict(TRAIN_PRESETS[key])).validate()

    return _from_dict(TrainConfig, _read_json(Path(source)), key).validate()


def save_train_config(config: TrainConfig, path: Path) -> None:
    """Write a training configuration as JSON."""
    _write_json(path, asdict(config))


def default_threads() -> int:
    """Thread count from BINORM_THREADS, defaulting to 1."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got '{raw}'") from None
    return max(1, value)


def _read_json(path: Path) -> Any:
    if not path.exists():
        raise ConfigurationError(f"Config file does not exist: {path}")

    try:
        with open(path, "r") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON ({e})") from e
    except OSError as e:
        raise ConfigurationError(f"{path}: {e}") from e


def _write_json(path: Path, data: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)

    with open(path, "w") as f:
        json.dump(data, f, indent=2)
