"""
Model Zoo Module

Fully-connected classifiers (a linear classifier is the one-layer case) with
activation metadata, deterministic forward passes that expose every layer's
output, and helpers for reading linear-classifier rows as class templates.

Layer weights are stored [out x in] and applied to row-major batches, so a layer
computes y = phi(x W^T + b). The final layer is always affine (identity activation)
and its output is the logits.
"""

from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from merge_lab.errors import DimensionError, DomainError, UnsupportedArchitectureError
from merge_lab.tensor.core import RngStream, Tensor, as_tensor, freeze, matmul, sample_gaussian
from merge_lab.utils.logger import get_logger

logger = get_logger(__name__)

ActivationKind = Literal["identity", "relu", "tanh"]

ACTIVATION_KINDS: Tuple[str, ...] = ("identity", "relu", "tanh")

# Lowest centered template cosine accepted as "the rows look like the classes"
TEMPLATE_COSINE_FLOOR = 0.8


class Activation(BaseModel):
    """An elementwise nonlinearity with phi(0) == 0 and Lipschitz constant 1."""

    model_config = ConfigDict(frozen=True)

    kind: ActivationKind = "identity"

    @property
    def lipschitz(self) -> float:
        return 1.0

    def apply(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        if self.kind == "tanh":
            return np.tanh(z)
        return z

    def derivative(self, z: np.ndarray, y: np.ndarray) -> np.ndarray:
        """d phi / dz given pre-activation z and output y = phi(z)."""
        if self.kind == "relu":
            return (z > 0.0).astype(np.float64)
        if self.kind == "tanh":
            return 1.0 - y * y
        return np.ones_like(z)


class Layer(BaseModel):
    """One affine map followed by an activation."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation()

    @model_validator(mode="after")
    def _check_shapes(self) -> "Layer":
        if self.weight.ndim != 2:
            raise DimensionError(f"layer weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match weight shape {self.weight.shape}"
            )
        return self

    @property
    def in_features(self) -> int:
        return int(self.weight.shape[1])

    @property
    def out_features(self) -> int:
        return int(self.weight.shape[0])


class ModelMeta(BaseModel):
    """Provenance recorded with every model and carried into checkpoints."""

    model_config = ConfigDict(frozen=True)

    seed: int = 0
    stream_id: int = 0
    arch_tag: str = ""
    config_hash: str = ""
    use_bias: bool = True
    constituents: List[int] = Field(default_factory=list)


class Model(BaseModel):
    """An ordered stack of layers; adjacent dimensions chain and the last layer is affine."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    layers: Tuple[Layer, ...]
    meta: ModelMeta = ModelMeta()

    @model_validator(mode="after")
    def _check_chain(self) -> "Model":
        if not self.layers:
            raise DomainError("a model needs at least one layer")
        for i, (prev, nxt) in enumerate(zip(self.layers, self.layers[1:])):
            if prev.out_features != nxt.in_features:
                raise DimensionError(
                    f"layer {i} outputs {prev.out_features} features but layer {i + 1} "
                    f"expects {nxt.in_features}"
                )
        if self.layers[-1].activation.kind != "identity":
            raise DomainError("the final layer must be affine (identity activation)")
        return self

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def widths(self) -> List[int]:
        return [self.layers[0].in_features] + [layer.out_features for layer in self.layers]

    @property
    def max_width(self) -> int:
        return max(self.widths)

    def with_parameters(
        self,
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray],
        **meta_updates: object,
    ) -> "Model":
        """Copy of this model with new parameter values and optionally updated metadata."""
        if len(weights) != self.depth or len(biases) != self.depth:
            raise DimensionError(f"expected {self.depth} weight and bias tensors")
        layers = tuple(
            Layer(weight=as_tensor(w), bias=as_tensor(b), activation=layer.activation)
            for layer, w, b in zip(self.layers, weights, biases)
        )
        meta = self.meta.model_copy(update=meta_updates) if meta_updates else self.meta
        return Model(layers=layers, meta=meta)


class ForwardTrace(BaseModel):
    """Every layer's pre-activation and output for one batch."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    inputs: np.ndarray
    preactivations: List[np.ndarray]
    outputs: List[np.ndarray]

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[-1]

    @property
    def features(self) -> np.ndarray:
        """Input of the final affine layer (the pre-classification activations)."""
        return self.outputs[-2] if len(self.outputs) > 1 else self.inputs


class TemplateAlignment(BaseModel):
    """
    How well each classifier row matches its class prototype.

    cosines compare class-centered rows with class-centered prototypes; plain_cosines
    compare the raw rows with the raw prototypes.
    """

    model_config = ConfigDict(frozen=True)

    cosines: List[float]
    plain_cosines: List[float]
    best_match: List[int]

    @property
    def all_matched(self) -> bool:
        return all(k == match for k, match in enumerate(self.best_match))

    @property
    def min_cosine(self) -> float:
        return min(self.cosines)

    @property
    def min_plain_cosine(self) -> float:
        return min(self.plain_cosines)

    def meets_floor(self, floor: float = TEMPLATE_COSINE_FLOOR) -> bool:
        return self.all_matched and self.min_cosine >= floor


def init_model(
    arch: Sequence[int],
    activation: ActivationKind,
    rng: RngStream,
    init_scale: float = 1.0,
    use_bias: bool = True,
    arch_tag: Optional[str] = None,
) -> Model:
    """
    Create a model with He-style Gaussian weights and zero biases.

    Weights are N(0, init_scale^2 * 2 / fan_in); hidden layers use the given
    activation, the last layer is affine.

    Args:
        arch (Sequence[int]): Layer widths from input to logits (at least two).
        activation (ActivationKind): Hidden-layer nonlinearity.
        rng (RngStream): Stream dedicated to this model.
        init_scale (float): Multiplier on the init standard deviation.
        use_bias (bool): Whether biases are trainable; they start at zero either way.
        arch_tag (Optional[str]): Label stored in the metadata.

    Raises:
        DomainError: If fewer than two widths are given or a width is not positive.
    """
    widths = [int(w) for w in arch]
    if len(widths) < 2:
        raise DomainError(f"an architecture needs at least two widths, got {widths}")
    if any(w <= 0 for w in widths):
        raise DomainError(f"widths must be positive, got {widths}")
    if activation not in ACTIVATION_KINDS:
        raise DomainError(f"unknown activation {activation!r}")
    if init_scale < 0:
        raise DomainError(f"init_scale must be non-negative, got {init_scale}")

    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        std = init_scale * float(np.sqrt(2.0 / fan_in))
        weight = sample_gaussian(rng, (fan_out, fan_in), 0.0, std)
        kind: ActivationKind = "identity" if i == len(widths) - 2 else activation
        layers.append(
            Layer(weight=weight, bias=freeze(np.zeros(fan_out)), activation=Activation(kind=kind))
        )
    tag = arch_tag or f"{activation}-" + "x".join(str(w) for w in widths)
    return Model(
        layers=tuple(layers),
        meta=ModelMeta(seed=rng.seed, stream_id=rng.stream_id, arch_tag=tag, use_bias=use_bias),
    )


def model_from_arrays(
    weights: Sequence[Sequence],
    biases: Optional[Sequence[Sequence]] = None,
    activations: Optional[Sequence[ActivationKind]] = None,
    meta: Optional[ModelMeta] = None,
) -> Model:
    """
    Build a model from explicit parameter values.

    Biases default to zero; activations default to identity for every layer.
    """
    ws = [as_tensor(w) for w in weights]
    bs = (
        [as_tensor(b) for b in biases]
        if biases is not None
        else [freeze(np.zeros(w.shape[0])) for w in ws]
    )
    kinds = list(activations) if activations is not None else ["identity"] * len(ws)
    if not (len(ws) == len(bs) == len(kinds)):
        raise DimensionError("weights, biases and activations must have equal lengths")
    layers = tuple(
        Layer(weight=w, bias=b, activation=Activation(kind=k)) for w, b, k in zip(ws, bs, kinds)
    )
    return Model(layers=layers, meta=meta or ModelMeta(use_bias=biases is not None))


def forward(model: Model, x: Tensor) -> ForwardTrace:
    """
    Run a batch through the model, keeping every layer's pre-activation and output.

    Args:
        model (Model): The network.
        x (Tensor): Inputs of shape [batch x in]; a 1-D input is treated as one row.

    Raises:
        DimensionError: If the input width does not match the first layer.
    """
    y = np.asarray(x, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    if y.ndim != 2 or y.shape[1] != model.layers[0].in_features:
        raise DimensionError(
            f"input shape {np.shape(x)} does not match model input width "
            f"{model.layers[0].in_features}"
        )
    inputs = freeze(np.array(y))
    preactivations: List[np.ndarray] = []
    outputs: List[np.ndarray] = []
    for layer in model.layers:
        z = matmul(y, layer.weight.T) + layer.bias
        y = layer.activation.apply(z)
        preactivations.append(freeze(z))
        outputs.append(freeze(np.asarray(y)))
    return ForwardTrace(inputs=inputs, preactivations=preactivations, outputs=outputs)


def template_rows(model: Model) -> Tensor:
    """
    Rows of a linear classifier's weight matrix, one template per class.

    Each row can be reshaped to the (height, width, channels) image it scores.

    Raises:
        UnsupportedArchitectureError: If the model has more than one layer.
    """
    if model.depth != 1:
        raise UnsupportedArchitectureError(
            f"templates are defined for linear classifiers, model has {model.depth} layers"
        )
    return model.layers[0].weight


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return matrix / np.where(norms == 0.0, 1.0, norms)


def template_alignment(classifier: Model, prototypes: Tensor) -> TemplateAlignment:
    """
    Compare classifier rows with class prototypes by cosine similarity.

    Softmax is unchanged when one vector is added to every row, so the matching
    and the gated cosines use rows and prototypes centered across classes. The
    raw-row cosines are reported next to them.
    """
    rows = template_rows(classifier)
    if rows.shape != prototypes.shape:
        raise DimensionError(f"rows {rows.shape} and prototypes {prototypes.shape} differ")
    centered = _unit_rows(rows - rows.mean(axis=0, keepdims=True)) @ _unit_rows(
        prototypes - prototypes.mean(axis=0, keepdims=True)
    ).T
    plain = _unit_rows(rows) @ _unit_rows(prototypes).T
    return TemplateAlignment(
        cosines=[float(centered[k, k]) for k in range(centered.shape[0])],
        plain_cosines=[float(plain[k, k]) for k in range(plain.shape[0])],
        best_match=[int(j) for j in np.argmax(centered, axis=1)],
    )


def architecture_signature(model: Model) -> Tuple[Tuple[int, int, str], ...]:
    """Layer shapes and activation kinds; equal signatures mean mergeable models."""
    return tuple(
        (layer.out_features, layer.in_features, layer.activation.kind) for layer in model.layers
    )


def parameter_count(model: Model) -> int:
    return sum(layer.weight.size + layer.bias.size for layer in model.layers)
