"""
Synthetic Data Module

Generates labeled image datasets whose class means are known prototype images.
Each class gets a structured pattern (bars, checkerboards, ramps, blobs, rings)
drawn from a seeded stream; samples are brightness-jittered, noised and clamped
copies of their prototype. Images are stored flattened in (height, width, channel)
row-major order.
"""

from pathlib import Path
from typing import Callable, Dict, List, Literal, Tuple, Union

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator

from merge_lab.errors import DimensionError, DomainError
from merge_lab.tensor.core import RngStream, StreamTag, Tensor, freeze
from merge_lab.utils.logger import get_logger

logger = get_logger(__name__)

# Prototypes of distinct classes must stay below this pairwise cosine
MAX_PROTOTYPE_COSINE = 0.9

# Redraws allowed per class before giving up
MAX_PROTOTYPE_ATTEMPTS = 1000

PatternFamily = Literal["mixed", "geometric", "radial"]


class DatasetSpec(BaseModel):
    """Parameters of one synthetic classification task."""

    model_config = ConfigDict(frozen=True)

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
    seed: int = Field(0, ge=0, le=2**64 - 1)

    @property
    def dim(self) -> int:
        return self.height * self.width * self.channels


class LabeledSet(BaseModel):
    """Flattened images with integer labels."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    images: np.ndarray
    labels: np.ndarray
    n_classes: int = Field(ge=2)

    @model_validator(mode="after")
    def _check_consistency(self) -> "LabeledSet":
        if self.images.ndim != 2:
            raise DimensionError(f"images must be [n x dim], got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DimensionError(
                f"{self.labels.shape[0]} labels for {self.images.shape[0]} images"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DomainError(f"labels must lie in [0, {self.n_classes})")
        return self

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.images.shape[1])

    def take(self, indices: npt.NDArray[np.int64]) -> "LabeledSet":
        """Return the samples at the given indices, in that order."""
        return LabeledSet(
            images=freeze(self.images[indices]),
            labels=freeze(self.labels[indices]),
            n_classes=self.n_classes,
        )


class GeneratedDataset(BaseModel):
    """The three splits plus the prototypes they were drawn around."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    spec: DatasetSpec
    train: LabeledSet
    val: LabeledSet
    test: LabeledSet
    prototypes: np.ndarray


def _grid(spec: DatasetSpec) -> Tuple[np.ndarray, np.ndarray]:
    ys = (np.arange(spec.height) + 0.5) / spec.height
    xs = (np.arange(spec.width) + 0.5) / spec.width
    return np.meshgrid(ys, xs, indexing="ij")


def _bars(gen: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    angle = gen.choice([0.0, np.pi / 2, np.pi / 4, 3 * np.pi / 4]) + gen.uniform(-0.15, 0.15)
    freq = gen.uniform(1.5, 3.5)
    phase = gen.uniform(0, 2 * np.pi)
    proj = np.cos(angle) * xx + np.sin(angle) * yy
    return np.clip(2.0 * np.sin(2 * np.pi * freq * proj + phase), 0.0, 1.0)


def _checker(gen: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    freq = gen.uniform(1.0, 3.0)
    phase_y, phase_x = gen.uniform(0, 2 * np.pi, size=2)
    wave = np.sin(2 * np.pi * freq * yy + phase_y) * np.sin(2 * np.pi * freq * xx + phase_x)
    return np.clip(2.0 * wave, 0.0, 1.0)


def _ramp(gen: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    angle = gen.uniform(0, 2 * np.pi)
    proj = np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)
    proj = (proj - proj.min()) / max(float(np.ptp(proj)), 1e-12)
    return np.clip(2.0 * proj - 1.0, 0.0, 1.0) ** 2


def _blob(gen: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    pattern = np.zeros_like(yy)
    for _ in range(int(gen.integers(1, 3))):
        cy, cx = gen.uniform(0.15, 0.85, size=2)
        width = gen.uniform(0.07, 0.18)
        pattern += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    return pattern


def _ring(gen: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    cy, cx = gen.uniform(0.3, 0.7, size=2)
    radius = gen.uniform(0.15, 0.35)
    width = gen.uniform(0.04, 0.08)
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return np.exp(-((dist - radius) ** 2) / (2 * width**2))


PatternFn = Callable[[np.random.Generator, np.ndarray, np.ndarray], np.ndarray]

PATTERN_FAMILIES: Dict[str, List[PatternFn]] = {
    "geometric": [_bars, _checker, _ramp],
    "radial": [_blob, _ring],
    "mixed": [_bars, _checker, _ramp, _blob, _ring],
}


def _draw_prototype(spec: DatasetSpec, gen: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(spec)
    patterns = PATTERN_FAMILIES[spec.family]
    pattern = patterns[int(gen.integers(len(patterns)))](gen, yy, xx)
    peak = float(pattern.max())
    if peak > 0:
        pattern = pattern / peak
    pattern = pattern * gen.uniform(0.6, 1.0)
    colors = gen.uniform(0.4, 1.0, size=spec.channels)
    return np.clip(pattern[:, :, None] * colors[None, None, :], 0.0, 1.0).reshape(-1)


def make_prototypes(spec: DatasetSpec) -> Tensor:
    """
    Draw one prototype image per class, rejecting candidates too similar to earlier ones.

    Raises:
        DomainError: If a class cannot be placed within MAX_PROTOTYPE_ATTEMPTS draws.
    """
    gen = RngStream(spec.seed).derive(StreamTag.PROTOTYPES).generator
    accepted: List[np.ndarray] = []
    for k in range(spec.n_classes):
        for _ in range(MAX_PROTOTYPE_ATTEMPTS):
            candidate = _draw_prototype(spec, gen)
            norm = float(np.linalg.norm(candidate))
            if norm == 0.0:
                continue
            if all(
                float(candidate @ other) / (norm * float(np.linalg.norm(other)))
                < MAX_PROTOTYPE_COSINE
                for other in accepted
            ):
                accepted.append(candidate)
                break
        else:
            raise DomainError(
                f"could not draw a prototype for class {k} with cosine < "
                f"{MAX_PROTOTYPE_COSINE} to the others; use fewer classes or larger images"
            )
    return freeze(np.stack(accepted))


def _sample_split(
    spec: DatasetSpec, prototypes: Tensor, per_class: int, tag: StreamTag
) -> LabeledSet:
    gen = RngStream(spec.seed).derive(tag).generator
    labels = np.repeat(np.arange(spec.n_classes, dtype=np.int64), per_class)
    u = gen.uniform(-1.0, 1.0, size=(labels.size, 1))
    noise = gen.standard_normal(size=(labels.size, spec.dim))
    images = prototypes[labels] * (1.0 + u * spec.brightness_jitter) + spec.noise_std * noise
    return LabeledSet(
        images=freeze(np.clip(images, 0.0, 1.0)),
        labels=freeze(labels),
        n_classes=spec.n_classes,
    )


def generate(spec: DatasetSpec) -> GeneratedDataset:
    """
    Generate train, validation and test splits plus the class prototypes.

    Args:
        spec (DatasetSpec): The task description.

    Returns:
        GeneratedDataset: Splits drawn from disjoint streams, and the prototypes.
    """
    prototypes = make_prototypes(spec)
    dataset = GeneratedDataset(
        spec=spec,
        train=_sample_split(spec, prototypes, spec.train_per_class, StreamTag.TRAIN_SPLIT),
        val=_sample_split(spec, prototypes, spec.val_per_class, StreamTag.VAL_SPLIT),
        test=_sample_split(spec, prototypes, spec.test_per_class, StreamTag.TEST_SPLIT),
        prototypes=prototypes,
    )
    logger.debug(
        f"Generated {spec.n_classes}-class {spec.family} dataset (seed {spec.seed}, "
        f"dim {spec.dim}): {len(dataset.train)}/{len(dataset.val)}/{len(dataset.test)} samples"
    )
    return dataset


def class_means(labeled: LabeledSet) -> Tensor:
    """
    Per-class arithmetic mean image.

    Samples are sorted per pixel and averaged as offsets from the smallest value, so
    the result does not depend on sample order and a class of identical images
    returns that image exactly.

    Raises:
        DomainError: If some class has no samples.
    """
    present = set(np.unique(labeled.labels).tolist())
    missing = [k for k in range(labeled.n_classes) if k not in present]
    if missing:
        raise DomainError(f"classes without samples: {missing}")
    means = np.empty((labeled.n_classes, labeled.dim), dtype=np.float64)
    for k in range(labeled.n_classes):
        members = np.sort(labeled.images[labeled.labels == k], axis=0)
        base = members[0]
        means[k] = base + np.sum(members - base, axis=0) / members.shape[0]
    return freeze(means)


def prototype_cosines(prototypes: Tensor) -> Tensor:
    """Pairwise cosine similarity matrix of prototype rows."""
    norms = np.linalg.norm(prototypes, axis=1)
    norms = np.where(norms == 0.0, 1.0, norms)
    unit = prototypes / norms[:, None]
    return freeze(unit @ unit.T)


def zero_noise_preset(spec: DatasetSpec) -> DatasetSpec:
    """The same task with noise and brightness jitter switched off."""
    return spec.model_copy(update={"noise_std": 0.0, "brightness_jitter": 0.0})


def cross_task_spec(spec: DatasetSpec, seed: int) -> DatasetSpec:
    """A second task of the same shape drawn from another seed and prototype family."""
    family: PatternFamily = "geometric" if spec.family == "radial" else "radial"
    return spec.model_copy(update={"seed": seed, "family": family})


def export_dataset(labeled: LabeledSet, path: Union[str, Path]) -> None:
    """Cache a split in the checkpoint tensor container (pixels stored as float32)."""
    from merge_lab.storage.checkpoint import write_tensors

    write_tensors(
        {
            "images": labeled.images,
            "labels": labeled.labels.astype(np.float64),
            "n_classes": np.array([labeled.n_classes], dtype=np.float64),
        },
        path,
    )


def import_dataset(path: Union[str, Path]) -> LabeledSet:
    """Load a split written by export_dataset."""
    from merge_lab.storage.checkpoint import read_tensors

    tensors = read_tensors(path)
    try:
        images, labels, n_classes = tensors["images"], tensors["labels"], tensors["n_classes"]
    except KeyError as e:
        raise DomainError(f"{path} is not a dataset export (missing {e})") from e
    return LabeledSet(
        images=freeze(np.array(images, dtype=np.float64)),
        labels=freeze(labels.astype(np.int64)),
        n_classes=int(n_classes[0]),
    )
