"""
Tensor Core Module

Dense float64 tensors, seeded random streams, norms and summary statistics shared by
every other module. Tensors are plain numpy arrays marked read-only once built;
all functions here are pure.

Random streams use numpy's PCG64 generator keyed by
SeedSequence(seed, spawn_key=(stream_id, *tags)), so identical (seed, stream_id, tags)
reproduce identical draws regardless of how work is scheduled.
"""

from enum import IntEnum
from typing import Iterable, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field

from merge_lab.errors import DimensionError, DomainError

Tensor = npt.NDArray[np.float64]

_UINT64_MAX = 2**64 - 1


class StreamTag(IntEnum):
    """Purpose tags for RngStream.derive."""

    INIT = 1
    SHUFFLE = 2
    PROTOTYPES = 3
    TRAIN_SPLIT = 4
    VAL_SPLIT = 5
    TEST_SPLIT = 6
    TRIALS = 7
    INPUTS = 8


class MatrixStats(BaseModel):
    """Population mean, population variance and entrywise max norm of a tensor."""

    model_config = ConfigDict(frozen=True)

    mean: float
    variance: float = Field(ge=0.0)
    max_abs: float = Field(ge=0.0)


class RngStream:
    """
    A reproducible random stream identified by (seed, stream_id).

    A stream is single-consumer: draws advance its state. Work that runs in
    parallel must use distinct stream ids or derived sub-streams.
    """

    def __init__(self, seed: int, stream_id: int = 0, tags: Tuple[int, ...] = ()) -> None:
        for name, value in (("seed", seed), ("stream_id", stream_id), *(("tag", t) for t in tags)):
            if not 0 <= int(value) <= _UINT64_MAX:
                raise DomainError(f"{name} must be a 64-bit unsigned integer, got {value}")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.tags = tuple(int(t) for t in tags)
        sequence = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.stream_id, *self.tags)
        )
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def derive(self, tag: int) -> "RngStream":
        """Return a fresh child stream for a sub-purpose; does not consume draws."""
        return RngStream(self.seed, self.stream_id, self.tags + (int(tag),))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, tags={self.tags})"


def freeze(array: np.ndarray) -> Tensor:
    """Mark an array read-only and return it."""
    array.flags.writeable = False
    return array


def as_tensor(values: Union[np.ndarray, Sequence, float]) -> Tensor:
    """
    Copy values into a read-only contiguous float64 tensor.

    Raises:
        DomainError: If any entry is NaN or infinite, or the input is a scalar.
    """
    array = np.array(values, dtype=np.float64, copy=True, order="C")
    if array.ndim == 0:
        raise DomainError("tensors need at least one dimension")
    if not np.all(np.isfinite(array)):
        raise DomainError("tensor contains non-finite entries")
    return freeze(array)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of a [r x k] and b [k x c].

    Uses einsum without BLAS dispatch so the accumulation order is fixed and
    results are bit-reproducible across thread counts.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return freeze(np.einsum("ik,kj->ij", a, b, optimize=False))


def stats(t: Tensor) -> MatrixStats:
    """Population mean, population variance and entrywise max absolute value."""
    if t.size == 0:
        raise DomainError("stats of an empty tensor are undefined")
    mean = float(np.mean(t))
    variance = float(np.mean(np.square(t - mean)))
    return MatrixStats(mean=mean, variance=variance, max_abs=max_abs(t))


def max_abs(t: Tensor) -> float:
    """Entrywise max norm."""
    if t.size == 0:
        raise DomainError("max norm of an empty tensor is undefined")
    return float(np.max(np.abs(t)))


def frobenius_norm(t: Tensor) -> float:
    return float(np.sqrt(np.sum(np.square(t))))


def scale(t: Tensor, c: float) -> Tensor:
    if not np.isfinite(c):
        raise DomainError(f"scale factor must be finite, got {c}")
    return freeze(np.asarray(t, dtype=np.float64) * float(c))


def cosine_similarity(a: Tensor, b: Tensor) -> float:
    """Cosine of the angle between two flattened tensors; 0 if either is zero."""
    a = np.ravel(a)
    b = np.ravel(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine needs equal sizes, got {a.shape} and {b.shape}")
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.dot(a, b) / denom)


def sample_gaussian(
    rng: RngStream, shape: Union[int, Iterable[int]], mean: float = 0.0, std: float = 1.0
) -> Tensor:
    """
    Draw i.i.d. N(mean, std^2) entries from the stream.

    Raises:
        DomainError: If std is negative or a dimension is not positive.
    """
    if std < 0:
        raise DomainError(f"std must be non-negative, got {std}")
    dims = (int(shape),) if isinstance(shape, (int, np.integer)) else tuple(int(d) for d in shape)
    if not dims or any(d <= 0 for d in dims):
        raise DomainError(f"shape must be non-empty with positive dimensions, got {dims}")
    z = rng.generator.standard_normal(dims)
    return freeze(mean + std * z)


def spectral_norm(t: Tensor, iters: int = 500, tol: float = 1e-12) -> float:
    """
    Power-iteration estimate of the largest singular value.

    Iterates on t^T t from the normalized all-ones vector; the estimate ||t v|| is
    nondecreasing across iterations. Stops early once successive estimates differ
    by at most tol (relative to max(1, estimate)). When the start vector lies in the
    null space of a nonzero t (e.g. [[1, -1]]) there is nothing to iterate on, and the
    exact value from top_singular_value is returned instead.

    Returns:
        float: The estimate; 0 only for a zero matrix.
    """
    if iters < 1:
        raise DomainError(f"iters must be at least 1, got {iters}")
    if t.ndim != 2:
        raise DimensionError(f"spectral norm needs a matrix, got shape {t.shape}")
    v = np.ones(t.shape[1], dtype=np.float64) / np.sqrt(t.shape[1])
    estimate = 0.0
    for _ in range(iters):
        u = t @ v
        current = float(np.linalg.norm(u))
        w = t.T @ u
        w_norm = float(np.linalg.norm(w))
        if w_norm == 0.0:
            # t v == 0, which only the start vector can hit
            return top_singular_value(t)
        v = w / w_norm
        if abs(current - estimate) <= tol * max(1.0, current):
            estimate = max(estimate, current)
            break
        estimate = max(estimate, current)
    return max(estimate, float(np.linalg.norm(t @ v)))


def top_singular_value(t: Tensor) -> float:
    """Exact largest singular value (via SVD)."""
    if t.ndim != 2:
        raise DimensionError(f"singular values need a matrix, got shape {t.shape}")
    if t.size == 0 or not np.any(t):
        return 0.0
    return float(np.linalg.svd(t, compute_uv=False)[0])
