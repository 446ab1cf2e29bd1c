"""
Experiment Config Module

Flat key=value experiment files. One setting per line; '#' starts a comment;
blank lines are ignored; lists are comma-separated; booleans are true/false.
Unknown and duplicate keys are rejected with the offending line number.

Every run writes the fully resolved config (defaults included) beside its outputs,
in the same format, so a run can be reproduced from its output directory alone.
"""

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union, get_args, get_origin

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from merge_lab.bounds.lab import BoundConfig
from merge_lab.data.synth import DatasetSpec, PatternFamily
from merge_lab.errors import ConfigError
from merge_lab.merging.operators import MergeMethod
from merge_lab.models.zoo import ActivationKind
from merge_lab.training.trainer import TrainConfig
from merge_lab.utils.config import get_config_value
from merge_lab.utils.logger import get_logger

logger = get_logger(__name__)

POOL_SIZE_PRESETS = (2, 3, 5, 7, 10)
DEFAULT_FACTOR_GRID = [1.0, 10.0, 50.0, 90.0, 100.0, 110.0]
RESOLVED_CONFIG_NAME = "resolved_config.txt"


def _default_output_dir() -> str:
    return str(get_config_value("default_output_dir", "runs"))


def _default_scatter_batch() -> int:
    return int(get_config_value("scatter_batch_size", 100))


class ExperimentConfig(BaseModel):
    """All settings of one harness run."""

    model_config = ConfigDict(frozen=True, extra="forbid", protected_namespaces=())

    # Dataset
    n_classes: int = Field(10, ge=2)
    height: int = Field(16, ge=1)
    width: int = Field(16, ge=1)
    channels: int = Field(1, ge=1)
    train_per_class: int = Field(100, ge=1)
    val_per_class: int = Field(30, ge=1)
    test_per_class: int = Field(50, ge=1)
    noise_std: float = Field(0.1, ge=0.0)
    brightness_jitter: float = Field(0.1, ge=0.0)
    family: PatternFamily = "mixed"

    # Models; an empty hidden_widths list means a linear classifier
    hidden_widths: List[int] = Field(default_factory=lambda: [64])
    activation: ActivationKind = "relu"
    init_scale: float = Field(1.0, ge=0.0)

    # Training
    lr: float = Field(0.01, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    lr_decay_factor: float = Field(0.1, gt=0.0, le=1.0)
    lr_decay_every: int = Field(20, ge=1)
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(64, ge=1)
    weight_decay: float = Field(0.0, ge=0.0)
    full_batch: bool = False

    # Pools and comparisons
    pool_size: int = 10
    model_counts: Optional[List[int]] = None
    factor_grid: List[float] = Field(default_factory=lambda: list(DEFAULT_FACTOR_GRID))
    methods: List[str] = Field(default_factory=lambda: [m.value for m in MergeMethod])
    scatter_batch_size: int = Field(default_factory=_default_scatter_batch, ge=1)
    output_dir: str = Field(default_factory=_default_output_dir)
    master_seed: int = Field(0, ge=0, le=2**64 - 1)

    # Templates
    templates_zero_noise: bool = True
    templates_self_merge: bool = False
    template_init_scale: float = Field(0.0, ge=0.0)
    template_epochs: int = Field(100, ge=1)
    template_lr: float = Field(0.005, gt=0.0)
    template_weight_decay: float = Field(100.0, ge=0.0)
    grid_cols: int = Field(5, ge=1)

    # Cross-task merging
    crosstask_seed_offset: int = Field(1, ge=0)
    crosstask_same_task: bool = False

    # Bounds
    taus: List[float] = Field(default_factory=lambda: [1.0, 2.0, 3.0])
    tau: float = Field(2.0, gt=0.0)
    c_s: float = Field(1.0, ge=0.0)
    bound_depth: int = Field(3, ge=1)
    bound_width: int = Field(16, ge=1)
    bound_activation: ActivationKind = "relu"
    sigma_w: float = Field(1.0, ge=0.0)
    sigma_b: float = Field(0.0, ge=0.0)
    bound_trials: int = Field(1000, ge=2)
    theorem_trials: int = Field(10_000, ge=2)
    variance_trials: int = Field(100_000, ge=2)
    fuzz_pairs: int = Field(1000, ge=1)
    inject_violation: bool = False

    @field_validator("pool_size")
    @classmethod
    def _check_pool_size(cls, value: int) -> int:
        if value not in POOL_SIZE_PRESETS:
            raise ValueError(f"pool_size must be one of {POOL_SIZE_PRESETS}")
        return value

    @field_validator("methods")
    @classmethod
    def _check_methods(cls, value: List[str]) -> List[str]:
        known = {m.value for m in MergeMethod}
        unknown = [m for m in value if m not in known]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {sorted(known)}")
        return value

    @field_validator("factor_grid", "taus")
    @classmethod
    def _check_positive(cls, value: List[float]) -> List[float]:
        if not value or any(v <= 0 for v in value):
            raise ValueError("needs at least one value, all positive")
        return value

    @model_validator(mode="after")
    def _check_counts(self) -> "ExperimentConfig":
        if self.model_counts is not None:
            bad = [k for k in self.model_counts if not 1 <= k <= self.pool_size]
            if bad or not self.model_counts:
                raise ValueError(f"model_counts must lie in [1, {self.pool_size}], got {bad}")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 (grayscale) or 3 (RGB)")
        return self

    @property
    def counts(self) -> List[int]:
        """Pool sizes evaluated by compare and magnitude."""
        if self.model_counts is not None:
            return list(self.model_counts)
        return [k for k in POOL_SIZE_PRESETS if k <= self.pool_size]

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            n_classes=self.n_classes,
            height=self.height,
            width=self.width,
            channels=self.channels,
            train_per_class=self.train_per_class,
            val_per_class=self.val_per_class,
            test_per_class=self.test_per_class,
            noise_std=self.noise_std,
            brightness_jitter=self.brightness_jitter,
            family=self.family,
            seed=self.master_seed,
        )

    def arch(self) -> List[int]:
        spec = self.dataset_spec()
        return [spec.dim, *self.hidden_widths, self.n_classes]

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            momentum=self.momentum,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_every=self.lr_decay_every,
            epochs=self.epochs,
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            full_batch=self.full_batch,
            seed=self.master_seed,
        )

    def template_train_config(self) -> TrainConfig:
        """
        Full-batch plain gradient descent with strong weight decay for the template
        classifier. Its fixed point sits close to the class-centered prototypes.
        """
        return TrainConfig(
            lr=self.template_lr,
            momentum=0.0,
            lr_decay_factor=1.0,
            lr_decay_every=1,
            epochs=self.template_epochs,
            batch_size=self.batch_size,
            weight_decay=self.template_weight_decay,
            full_batch=True,
            seed=self.master_seed,
        )

    def crosstask_seed(self) -> int:
        """Dataset seed of the second task, wrapped into the 64-bit seed range."""
        return (self.master_seed + self.crosstask_seed_offset) % 2**64

    def bound_config(self) -> BoundConfig:
        return BoundConfig(
            tau=self.tau,
            c_s=self.c_s,
            depth=self.bound_depth,
            width=self.bound_width,
            sigma_w=self.sigma_w,
            sigma_b=self.sigma_b,
            activation=self.bound_activation,
            trials=self.bound_trials,
            seed=self.master_seed,
        )

    def pool_hash(
        self,
        spec: DatasetSpec,
        arch: List[int],
        activation: ActivationKind,
        init_scale: float,
        train_cfg: Optional[TrainConfig] = None,
    ) -> str:
        """Digest of everything that determines a trained model."""
        train_cfg = self.train_config() if train_cfg is None else train_cfg
        recipe = {
            "dataset": spec.model_dump(),
            "arch": arch,
            "activation": activation,
            "init_scale": init_scale,
            "train": train_cfg.model_dump(),
        }
        encoded = json.dumps(recipe, sort_keys=True)
        return hashlib.sha256(encoded.encode("utf-8")).hexdigest()[:12]

    def to_text(self) -> str:
        """Resolved key=value lines for every setting, in declaration order."""
        lines = []
        for name in type(self).model_fields:
            value = getattr(self, name)
            if value is None:
                continue
            lines.append(f"{name}={_format_value(value)}")
        return "\n".join(lines) + "\n"

    def write_resolved(self, out_dir: Union[str, Path]) -> Path:
        target = Path(out_dir) / RESOLVED_CONFIG_NAME
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(self.to_text(), encoding="utf-8")
        return target


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _is_list_field(name: str) -> bool:
    annotation = ExperimentConfig.model_fields[name].annotation
    if get_origin(annotation) is Union:
        annotation = next(a for a in get_args(annotation) if a is not type(None))
    return get_origin(annotation) in (list, List)


def parse_lines(text: str) -> Tuple[Dict[str, object], Dict[str, int]]:
    """
    Split config text into raw values.

    Returns:
        Tuple of the key -> value mapping (lists already split) and key -> line number.

    Raises:
        ConfigError: For malformed lines, unknown keys or duplicate keys.
    """
    values: Dict[str, object] = {}
    lines: Dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw.strip()!r}", number)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in ExperimentConfig.model_fields:
            raise ConfigError(f"unknown key {key!r}", number)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", number)
        if _is_list_field(key):
            values[key] = [item.strip() for item in value.split(",") if item.strip()]
        else:
            values[key] = value
        lines[key] = number
    return values, lines


def parse_config(text: str, **overrides: object) -> ExperimentConfig:
    """
    Parse and validate config text; overrides replace parsed values.

    Raises:
        ConfigError: With the line number of the first invalid setting.
    """
    values, lines = parse_lines(text)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except ValidationError as e:
        error = e.errors()[0]
        key = str(error["loc"][0]) if error["loc"] else ""
        raise ConfigError(f"{key or 'config'}: {error['msg']}", lines.get(key)) from e


def load_config(path: Union[str, Path, None], **overrides: object) -> ExperimentConfig:
    """Load an experiment file; None gives the defaults (with overrides)."""
    if path is None:
        return parse_config("", **overrides)
    text = Path(path).read_text(encoding="utf-8")
    cfg = parse_config(text, **overrides)
    logger.debug(f"Loaded experiment config {path}")
    return cfg
