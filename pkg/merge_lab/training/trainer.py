"""
Trainer Module

Seeded mini-batch SGD with momentum and step learning-rate decay, softmax
cross-entropy loss and explicit backpropagation through the affine and activation
layers of model_zoo models. Also provides evaluation, a finite-difference gradient
check and pool training for the merging experiments.
"""

import hashlib
from concurrent.futures import ThreadPoolExecutor
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from merge_lab.data.synth import GeneratedDataset, LabeledSet
from merge_lab.errors import DimensionError, DomainError, TrainingDivergedError
from merge_lab.models.zoo import (
    Activation,
    ActivationKind,
    Model,
    forward,
    init_model,
    parameter_count,
)
from merge_lab.tensor.core import RngStream, StreamTag, Tensor, matmul
from merge_lab.utils.config import get_config_value
from merge_lab.utils.logger import get_logger

logger = get_logger(__name__)

LossKind = Literal["cross_entropy", "squared"]

# Largest model gradient_check accepts
MAX_GRADIENT_CHECK_PARAMS = 1000

# Relative errors are measured against max(|analytic|, |numeric|, this floor)
GRADIENT_CHECK_FLOOR = 1e-4


class TrainConfig(BaseModel):
    """Optimizer settings; defaults follow a momentum-SGD step-decay recipe."""

    model_config = ConfigDict(frozen=True)

    lr: float = Field(0.01, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    lr_decay_factor: float = Field(0.1, gt=0.0, le=1.0)
    lr_decay_every: int = Field(20, ge=1)
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(64, ge=1)
    weight_decay: float = Field(0.0, ge=0.0)
    full_batch: bool = False
    seed: int = Field(0, ge=0, le=2**64 - 1)

    def config_hash(self) -> str:
        """Short stable digest of the settings, stored in model metadata."""
        encoded = self.model_dump_json()
        return hashlib.sha256(encoded.encode("utf-8")).hexdigest()[:12]

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)


class TrainLog(BaseModel):
    """Per-epoch training loss and validation accuracy."""

    train_loss: List[float] = Field(default_factory=list)
    val_accuracy: List[float] = Field(default_factory=list)
    final_val_accuracy: float = 0.0
    final_test_accuracy: Optional[float] = None


class EvalResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    accuracy: float
    mean_loss: float


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean cross-entropy of integer labels under softmax(logits).

    Returns:
        Tuple[float, np.ndarray]: The mean loss and the softmax probabilities.
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sums = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(sums)
    loss = -float(np.mean(log_probs[np.arange(labels.size), labels]))
    return loss, exp / sums


def accuracy_from_logits(logits: Tensor, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax matches the label; ties go to the lowest index."""
    if labels.size == 0:
        raise DomainError("accuracy of an empty set is undefined")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def predict_logits(model: Model, x: Tensor) -> Tensor:
    return forward(model, x).logits


def evaluate(model: Model, labeled: LabeledSet) -> EvalResult:
    """
    Accuracy and mean cross-entropy of a model on a labeled set.

    Raises:
        DomainError: If the set is empty.
        DimensionError: If the set's classes exceed the model's outputs.
    """
    if len(labeled) == 0:
        raise DomainError("cannot evaluate on an empty set")
    logits = predict_logits(model, labeled.images)
    if logits.shape[1] < labeled.n_classes:
        raise DimensionError(
            f"model has {logits.shape[1]} outputs for a {labeled.n_classes}-class set"
        )
    loss, _ = softmax_cross_entropy(logits, labeled.labels)
    return EvalResult(accuracy=accuracy_from_logits(logits, labeled.labels), mean_loss=loss)


def _forward_arrays(
    weights: Sequence[np.ndarray],
    biases: Sequence[np.ndarray],
    activations: Sequence[Activation],
    x: np.ndarray,
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    zs: List[np.ndarray] = []
    ys: List[np.ndarray] = [x]
    y = x
    for w, b, act in zip(weights, biases, activations):
        z = matmul(y, w.T) + b
        y = act.apply(z)
        zs.append(z)
        ys.append(y)
    return zs, ys


def _loss_and_output_grad(
    logits: np.ndarray, labels: np.ndarray, loss: LossKind
) -> Tuple[float, np.ndarray]:
    batch = labels.size
    if loss == "squared":
        targets = np.zeros_like(logits)
        targets[np.arange(batch), labels] = 1.0
        diff = logits - targets
        return 0.5 * float(np.sum(diff * diff)) / batch, diff / batch
    value, probs = softmax_cross_entropy(logits, labels)
    probs[np.arange(batch), labels] -= 1.0
    return value, probs / batch


def loss_and_gradients(
    weights: Sequence[np.ndarray],
    biases: Sequence[np.ndarray],
    activations: Sequence[Activation],
    x: np.ndarray,
    labels: np.ndarray,
    loss: LossKind = "cross_entropy",
) -> Tuple[float, List[np.ndarray], List[np.ndarray]]:
    """
    Mean batch loss and its gradients by backpropagation.

    Returns:
        Tuple of the loss, per-layer weight gradients and per-layer bias gradients.
    """
    zs, ys = _forward_arrays(weights, biases, activations, x)
    value, delta = _loss_and_output_grad(ys[-1], labels, loss)
    grad_w: List[np.ndarray] = [np.empty(0)] * len(weights)
    grad_b: List[np.ndarray] = [np.empty(0)] * len(weights)
    for layer in range(len(weights) - 1, -1, -1):
        delta = delta * activations[layer].derivative(zs[layer], ys[layer + 1])
        grad_w[layer] = np.asarray(matmul(delta.T, ys[layer]))
        grad_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = np.asarray(matmul(delta, weights[layer]))
    return value, grad_w, grad_b


def train(
    model: Model,
    train_set: LabeledSet,
    val_set: LabeledSet,
    cfg: TrainConfig,
    test_set: Optional[LabeledSet] = None,
) -> Tuple[Model, TrainLog]:
    """
    Train a copy of the model with momentum SGD on softmax cross-entropy.

    Batches are reshuffled each epoch from a stream keyed by (cfg.seed,
    model.meta.stream_id, model.meta.seed), so the result is fully determined by
    the model's provenance and the config.

    Raises:
        TrainingDivergedError: If the loss becomes NaN or infinite.
    """
    if train_set.dim != model.layers[0].in_features:
        raise DimensionError(
            f"training inputs have {train_set.dim} features, model expects "
            f"{model.layers[0].in_features}"
        )
    if cfg.epochs == 0:
        log = TrainLog(final_val_accuracy=evaluate(model, val_set).accuracy)
        if test_set is not None:
            log.final_test_accuracy = evaluate(model, test_set).accuracy
        return model, log

    weights = [np.array(layer.weight) for layer in model.layers]
    biases = [np.array(layer.bias) for layer in model.layers]
    activations = [layer.activation for layer in model.layers]
    velocity_w = [np.zeros_like(w) for w in weights]
    velocity_b = [np.zeros_like(b) for b in biases]
    train_biases = model.meta.use_bias

    shuffle = (
        RngStream(cfg.seed, model.meta.stream_id)
        .derive(StreamTag.SHUFFLE)
        .derive(model.meta.seed)
        .generator
    )
    n = len(train_set)
    batch_size = n if cfg.full_batch else min(cfg.batch_size, n)
    log = TrainLog()

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = shuffle.permutation(n)
        epoch_loss = 0.0
        for step, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            value, grad_w, grad_b = loss_and_gradients(
                weights, biases, activations, train_set.images[idx], train_set.labels[idx]
            )
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"loss became {value} at epoch {epoch}, step {step} with lr {lr:g}; "
                    f"lower the learning rate"
                )
            epoch_loss += value * idx.size
            for i in range(len(weights)):
                g = grad_w[i] + cfg.weight_decay * weights[i]
                velocity_w[i] = cfg.momentum * velocity_w[i] + g
                weights[i] -= lr * velocity_w[i]
                if train_biases:
                    velocity_b[i] = cfg.momentum * velocity_b[i] + grad_b[i]
                    biases[i] -= lr * velocity_b[i]

        current = model.with_parameters(weights, biases)
        log.train_loss.append(epoch_loss / n)
        log.val_accuracy.append(evaluate(current, val_set).accuracy)
        logger.debug(
            f"model {model.meta.stream_id} epoch {epoch + 1}/{cfg.epochs}: "
            f"loss {log.train_loss[-1]:.4f}, val acc {log.val_accuracy[-1]:.4f}, lr {lr:g}"
        )

    trained = model.with_parameters(weights, biases, config_hash=cfg.config_hash())
    log.final_val_accuracy = log.val_accuracy[-1]
    if test_set is not None:
        log.final_test_accuracy = evaluate(trained, test_set).accuracy
    return trained, log


def gradient_check(
    model: Model,
    batch: LabeledSet,
    loss: LossKind = "cross_entropy",
    eps: Optional[float] = None,
) -> float:
    """
    Largest relative error between backprop gradients and central finite differences.

    Args:
        eps (Optional[float]): Finite-difference step; defaults to the gradient_check_eps
            setting (1e-5).

    Raises:
        DomainError: If the model has more than MAX_GRADIENT_CHECK_PARAMS parameters
            or the step is not positive.
    """
    if parameter_count(model) > MAX_GRADIENT_CHECK_PARAMS:
        raise DomainError(
            f"gradient check is limited to {MAX_GRADIENT_CHECK_PARAMS} parameters, "
            f"model has {parameter_count(model)}"
        )
    if eps is None:
        eps = float(get_config_value("gradient_check_eps", 1e-5))
    if eps <= 0:
        raise DomainError(f"gradient check step must be positive, got {eps}")
    weights = [np.array(layer.weight) for layer in model.layers]
    biases = [np.array(layer.bias) for layer in model.layers]
    activations = [layer.activation for layer in model.layers]
    x, labels = batch.images, batch.labels

    _, grad_w, grad_b = loss_and_gradients(weights, biases, activations, x, labels, loss)

    def loss_at() -> float:
        return loss_and_gradients(weights, biases, activations, x, labels, loss)[0]

    worst = 0.0
    for params, grads in ((weights, grad_w), (biases, grad_b)):
        for p, g in zip(params, grads):
            for index in np.ndindex(p.shape):
                original = p[index]
                p[index] = original + eps
                plus = loss_at()
                p[index] = original - eps
                minus = loss_at()
                p[index] = original
                numeric = (plus - minus) / (2.0 * eps)
                analytic = float(g[index])
                denom = max(abs(analytic), abs(numeric), GRADIENT_CHECK_FLOOR)
                worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def train_pool(
    arch: Sequence[int],
    activation: ActivationKind,
    data: GeneratedDataset,
    cfg: TrainConfig,
    master_seed: int,
    pool_size: int,
    jobs: int = 1,
    init_scale: float = 1.0,
    stream_offset: int = 0,
) -> List[Tuple[Model, TrainLog]]:
    """
    Train pool_size models that differ only in their init and shuffle streams.

    Model i is initialized from stream (master_seed, stream_offset + i). Results are
    returned in index order whatever the number of worker threads.
    """
    if pool_size < 1:
        raise DomainError(f"pool_size must be at least 1, got {pool_size}")

    def train_one(i: int) -> Tuple[Model, TrainLog]:
        rng = RngStream(master_seed, stream_offset + i)
        model = init_model(arch, activation, rng.derive(StreamTag.INIT), init_scale=init_scale)
        trained, log = train(model, data.train, data.val, cfg, test_set=data.test)
        logger.info(
            f"Trained model {stream_offset + i}: val acc {log.final_val_accuracy:.4f}, "
            f"test acc {log.final_test_accuracy:.4f}"
        )
        return trained, log

    indices = range(pool_size)
    if jobs <= 1:
        return [train_one(i) for i in indices]
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        return list(executor.map(train_one, indices))
