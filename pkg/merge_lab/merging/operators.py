"""
Merge Operators Module

Combination operators over pools of identically shaped models: weight-space soups
(uniform, weighted, greedy), output-space ensembles over logits or penultimate
features, greedy ensembles, magnitude scaling and classifier template arithmetic.

Averages are computed over per-entry sorted stacks, so every operator is exactly
invariant to pool order, and averaging copies of one model returns that model
bit for bit.
"""

from enum import Enum
from typing import Callable, Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from merge_lab.data.synth import LabeledSet
from merge_lab.errors import DomainError, IncompatiblePoolError, UnsupportedArchitectureError
from merge_lab.models.zoo import Model, architecture_signature, forward, template_rows
from merge_lab.tensor.core import Tensor, freeze, matmul, scale
from merge_lab.training.trainer import accuracy_from_logits
from merge_lab.utils.logger import get_logger

logger = get_logger(__name__)

# Soup weights must sum to one within this tolerance
WEIGHT_SUM_TOL = 1e-12

FeatureHead = Literal["merged", "first_model"]
EnsembleLevel = Literal["logits", "features"]


class MergeMethod(str, Enum):
    """Combination methods; values appear verbatim in result files."""

    UNIFORM_SOUP = "uniform_soup"
    GREEDY_SOUP = "greedy_soup"
    ENS_LOGITS = "ens_logits"
    ENS_FEATURES = "ens_features"
    ENS_FEATURES_STAR = "ens_features_star"
    GREEDY_ENS_LOGITS = "greedy_ens_logits"
    GREEDY_ENS_FEATURES = "greedy_ens_features"


# Report tags that are not merge methods
PERF_AVE = "perf_ave"
INDIVIDUAL = "individual"

# Methods that read the penultimate layer
FEATURE_METHODS = frozenset(
    m.value
    for m in (MergeMethod.ENS_FEATURES, MergeMethod.ENS_FEATURES_STAR, MergeMethod.GREEDY_ENS_FEATURES)
)


class ModelPool:
    """
    An ordered, non-empty collection of architecturally identical models.

    Args:
        models (Sequence[Model]): Pool members; index order is significant for ties.
        val_set (Optional[LabeledSet]): Validation split used by greedy selection.

    Raises:
        DomainError: If the pool is empty.
        IncompatiblePoolError: If two members differ in layer shapes or activations.
    """

    def __init__(self, models: Sequence[Model], val_set: Optional[LabeledSet] = None) -> None:
        if not models:
            raise DomainError("a model pool needs at least one model")
        signature = architecture_signature(models[0])
        for i, model in enumerate(models[1:], start=1):
            if architecture_signature(model) != signature:
                raise IncompatiblePoolError(
                    f"model {i} has architecture {architecture_signature(model)}, "
                    f"model 0 has {signature}"
                )
        self.models: Tuple[Model, ...] = tuple(models)
        self.val_set = val_set
        self.signature = signature

    def __len__(self) -> int:
        return len(self.models)

    def __getitem__(self, index: int) -> Model:
        return self.models[index]

    def __iter__(self) -> Iterator[Model]:
        return iter(self.models)

    @property
    def depth(self) -> int:
        return len(self.signature)

    def subset(self, indices: Sequence[int]) -> "ModelPool":
        """Pool of the members at the given indices, in that order."""
        for i in indices:
            if not 0 <= i < len(self.models):
                raise DomainError(f"pool index {i} out of range for {len(self.models)} models")
        return ModelPool([self.models[i] for i in indices], self.val_set)

    def first(self, k: int) -> "ModelPool":
        if not 1 <= k <= len(self.models):
            raise DomainError(f"cannot take {k} models from a pool of {len(self.models)}")
        return self.subset(range(k))


class GreedyStep(BaseModel):
    candidate: int
    val_accuracy: float
    accepted: bool


class GreedyResult(BaseModel):
    """Outcome of a greedy selection: chosen indices, decisions and final validation accuracy."""

    ranking: List[int]
    individual_val_accuracy: List[float]
    selected: List[int]
    val_accuracy: float
    trace: List[GreedyStep] = Field(default_factory=list)


def _mean_stack(stack: np.ndarray) -> np.ndarray:
    """Uniform mean over axis 0, exact for identical slices and order invariant."""
    ordered = np.sort(stack, axis=0)
    low, high = ordered[0], ordered[-1]
    mean = low + np.sum(ordered - low, axis=0) / ordered.shape[0]
    return np.clip(mean, low, high)


def _weighted_stack(stack: np.ndarray, weights: np.ndarray) -> np.ndarray:
    ordered = np.sort(stack, axis=0)
    terms = np.sort(weights.reshape((-1,) + (1,) * (stack.ndim - 1)) * stack, axis=0)
    return np.clip(np.sum(terms, axis=0), ordered[0], ordered[-1])


def _check_weights(weights: Sequence[float], k: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise DomainError(f"expected {k} soup weights, got {w.size}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise DomainError(f"soup weights must be finite and nonnegative, got {w.tolist()}")
    if abs(float(np.sum(w)) - 1.0) > WEIGHT_SUM_TOL:
        raise DomainError(f"soup weights must sum to 1, got {float(np.sum(w))!r}")
    return w


def uniform_soup(pool: ModelPool, weights: Optional[Sequence[float]] = None) -> Model:
    """
    Elementwise (optionally weighted) average of every parameter tensor in the pool.

    Args:
        pool (ModelPool): Models to average.
        weights (Optional[Sequence[float]]): Nonnegative weights summing to 1;
            uniform 1/k when omitted.

    Returns:
        Model: The soup; its metadata lists the constituents' stream ids.
    """
    w = _check_weights(weights, len(pool)) if weights is not None else None
    merged_w: List[np.ndarray] = []
    merged_b: List[np.ndarray] = []
    for layer in range(pool.depth):
        for params, out in (
            ([m.layers[layer].weight for m in pool], merged_w),
            ([m.layers[layer].bias for m in pool], merged_b),
        ):
            stack = np.stack(params)
            out.append(_mean_stack(stack) if w is None else _weighted_stack(stack, w))
    first = pool[0]
    return first.with_parameters(
        merged_w,
        merged_b,
        constituents=[m.meta.stream_id for m in pool],
        config_hash=first.meta.config_hash,
    )


def _ensemble_from_logits(per_model: Sequence[np.ndarray]) -> Tensor:
    return freeze(_mean_stack(np.stack(per_model)))


def ens_logits(pool: ModelPool, x: Tensor) -> Tensor:
    """Arithmetic mean of the members' logits (never of probabilities)."""
    return _ensemble_from_logits([forward(m, x).logits for m in pool])


def _merged_head(pool: ModelPool) -> Tuple[np.ndarray, np.ndarray]:
    weights = _mean_stack(np.stack([m.layers[-1].weight for m in pool]))
    biases = _mean_stack(np.stack([m.layers[-1].bias for m in pool]))
    return weights, biases


def ens_features(pool: ModelPool, x: Tensor, head: FeatureHead = "merged") -> Tensor:
    """
    Average penultimate features across members, then apply one final affine layer.

    Args:
        pool (ModelPool): Multi-layer models.
        x (Tensor): Input batch.
        head (FeatureHead): "merged" averages the final layers; "first_model" uses the
            first member's final layer.

    Raises:
        UnsupportedArchitectureError: If the models have a single layer.
    """
    if pool.depth < 2:
        raise UnsupportedArchitectureError(
            "feature ensembles need a hidden layer; single-layer models have no features"
        )
    features = _mean_stack(np.stack([forward(m, x).features for m in pool]))
    if head == "first_model":
        weight, bias = pool[0].layers[-1].weight, pool[0].layers[-1].bias
    elif head == "merged":
        weight, bias = _merged_head(pool)
    else:
        raise DomainError(f"unknown feature head {head!r}")
    return freeze(matmul(features, weight.T) + bias)


def _greedy_select(pool: ModelPool, score: Callable[[List[int]], float]) -> GreedyResult:
    individual = [score([i]) for i in range(len(pool))]
    ranking = sorted(range(len(pool)), key=lambda i: (-individual[i], i))
    selected = [ranking[0]]
    current = individual[ranking[0]]
    trace = [GreedyStep(candidate=ranking[0], val_accuracy=current, accepted=True)]
    for candidate in ranking[1:]:
        accuracy = score(selected + [candidate])
        accepted = accuracy >= current
        trace.append(GreedyStep(candidate=candidate, val_accuracy=accuracy, accepted=accepted))
        logger.debug(
            f"greedy candidate {candidate}: val acc {accuracy:.4f} vs {current:.4f} "
            f"-> {'accept' if accepted else 'reject'}"
        )
        if accepted:
            selected.append(candidate)
            current = accuracy
    return GreedyResult(
        ranking=ranking,
        individual_val_accuracy=individual,
        selected=selected,
        val_accuracy=current,
        trace=trace,
    )


def _resolve_val(pool: ModelPool, val_set: Optional[LabeledSet]) -> LabeledSet:
    resolved = val_set if val_set is not None else pool.val_set
    if resolved is None or len(resolved) == 0:
        raise DomainError("greedy selection needs a non-empty validation set")
    return resolved


def greedy_soup(
    pool: ModelPool, val_set: Optional[LabeledSet] = None
) -> Tuple[Model, GreedyResult]:
    """
    Greedy soup over the pool's initial validation ranking.

    Models are ranked by validation accuracy (ties to the lower index). Starting from
    the best, each next candidate is kept iff the uniform soup of the selection plus
    the candidate scores at least the current soup's validation accuracy.

    Returns:
        Tuple[Model, GreedyResult]: The final soup and the selection record.
    """
    val = _resolve_val(pool, val_set)

    def score(indices: List[int]) -> float:
        soup = uniform_soup(pool.subset(indices))
        return accuracy_from_logits(forward(soup, val.images).logits, val.labels)

    result = _greedy_select(pool, score)
    logger.info(
        f"Greedy soup kept {len(result.selected)}/{len(pool)} models "
        f"({result.selected}), val acc {result.val_accuracy:.4f}"
    )
    return uniform_soup(pool.subset(result.selected)), result


def greedy_ensemble(
    pool: ModelPool, level: EnsembleLevel = "logits", val_set: Optional[LabeledSet] = None
) -> GreedyResult:
    """
    Greedy selection with the same loop as greedy_soup, combining by ensembling.

    Args:
        pool (ModelPool): Candidates.
        level (EnsembleLevel): "logits" or "features" (merged head).
        val_set (Optional[LabeledSet]): Overrides the pool's validation set.
    """
    val = _resolve_val(pool, val_set)
    if level == "logits":
        cached = [forward(m, val.images).logits for m in pool]

        def score(indices: List[int]) -> float:
            logits = _ensemble_from_logits([cached[i] for i in indices])
            return accuracy_from_logits(logits, val.labels)

    elif level == "features":

        def score(indices: List[int]) -> float:
            return accuracy_from_logits(ens_features(pool.subset(indices), val.images), val.labels)

    else:
        raise DomainError(f"unknown ensemble level {level!r}")

    result = _greedy_select(pool, score)
    logger.info(
        f"Greedy {level} ensemble kept {len(result.selected)}/{len(pool)} models, "
        f"val acc {result.val_accuracy:.4f}"
    )
    return result


def scale_weights(model: Model, c: float) -> Model:
    """Multiply every weight and bias by c."""
    return model.with_parameters(
        [scale(layer.weight, c) for layer in model.layers],
        [scale(layer.bias, c) for layer in model.layers],
    )


def merge_templates(classifier: Model, i: int, j: int) -> Tensor:
    """
    Average of classifier rows i and j, reshapeable to the input image.

    Raises:
        UnsupportedArchitectureError: If the classifier has more than one layer.
        DomainError: If a class index is out of range.
    """
    rows = template_rows(classifier)
    for index in (i, j):
        if not 0 <= index < rows.shape[0]:
            raise DomainError(f"class index {index} out of range for {rows.shape[0]} classes")
    return freeze(0.5 * (rows[i] + rows[j]))


def individual_accuracies(pool: ModelPool, x: Tensor, labels: np.ndarray) -> List[float]:
    return [accuracy_from_logits(forward(m, x).logits, labels) for m in pool]


def evaluate_method(
    method: str,
    pool: ModelPool,
    x: Tensor,
    labels: np.ndarray,
    val_set: Optional[LabeledSet] = None,
) -> float:
    """
    Accuracy of one combination method on a labeled batch.

    Greedy methods select on the validation set and are scored on (x, labels).
    The perf_ave tag gives the mean accuracy of the individual members.

    Raises:
        DomainError: If the tag is unknown.
    """
    method = getattr(method, "value", method)
    if method == PERF_AVE:
        return float(np.mean(individual_accuracies(pool, x, labels)))
    try:
        tag = MergeMethod(method)
    except ValueError as e:
        raise DomainError(f"unknown merge method {method!r}") from e

    if tag is MergeMethod.UNIFORM_SOUP:
        logits = forward(uniform_soup(pool), x).logits
    elif tag is MergeMethod.GREEDY_SOUP:
        soup, _ = greedy_soup(pool, val_set)
        logits = forward(soup, x).logits
    elif tag is MergeMethod.ENS_LOGITS:
        logits = ens_logits(pool, x)
    elif tag is MergeMethod.ENS_FEATURES:
        logits = ens_features(pool, x, head="merged")
    elif tag is MergeMethod.ENS_FEATURES_STAR:
        logits = ens_features(pool, x, head="first_model")
    elif tag is MergeMethod.GREEDY_ENS_LOGITS:
        result = greedy_ensemble(pool, "logits", val_set)
        logits = ens_logits(pool.subset(result.selected), x)
    else:
        result = greedy_ensemble(pool, "features", val_set)
        logits = ens_features(pool.subset(result.selected), x, head="merged")
    return accuracy_from_logits(logits, labels)


def method_supported(method: str, pool: ModelPool) -> bool:
    """Whether the method is defined for the pool's architecture."""
    if getattr(method, "value", method) in FEATURE_METHODS:
        return pool.depth >= 2
    return True


def evaluate_methods(
    methods: Sequence[str],
    pool: ModelPool,
    x: Tensor,
    labels: np.ndarray,
    val_set: Optional[LabeledSet] = None,
) -> Dict[str, float]:
    """Accuracy per method, skipping methods the architecture does not support."""
    results: Dict[str, float] = {}
    for method in methods:
        tag = str(getattr(method, "value", method))
        if not method_supported(tag, pool):
            logger.warning(f"Skipping {tag}: models have no hidden layer")
            continue
        results[tag] = evaluate_method(tag, pool, x, labels, val_set)
    return results
