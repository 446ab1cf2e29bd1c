"""
Tests for models/zoo.py - Classifiers, forward passes and templates
"""

import numpy as np
import pytest
from hypothesis import given, seed, settings, strategies as st

from merge_lab.errors import DimensionError, DomainError, UnsupportedArchitectureError
from merge_lab.merging.operators import scale_weights
from merge_lab.models.zoo import (
    TEMPLATE_COSINE_FLOOR,
    Activation,
    Layer,
    Model,
    ModelMeta,
    architecture_signature,
    forward,
    init_model,
    model_from_arrays,
    parameter_count,
    template_alignment,
    template_rows,
)
from merge_lab.tensor.core import (
    RngStream,
    StreamTag,
    cosine_similarity,
    sample_gaussian,
    top_singular_value,
)


class TestActivation:
    """Tests for Activation."""

    @pytest.mark.parametrize("kind", ["identity", "relu", "tanh"])
    def test_zero_maps_to_zero(self, kind):
        """Test phi(0) == 0 and L == 1 for every kind."""
        act = Activation(kind=kind)
        assert act.apply(np.zeros(3)).tolist() == [0.0, 0.0, 0.0]
        assert act.lipschitz == 1.0

    def test_unknown_kind_rejected(self):
        """Test an unknown activation is rejected."""
        with pytest.raises(ValueError):
            Activation(kind="gelu")


class TestInitModel:
    """Tests for init_model."""

    def test_deterministic(self):
        """Test the same stream gives identical models."""
        a = init_model([4, 3], "relu", RngStream(1, 2).derive(StreamTag.INIT))
        b = init_model([4, 3], "relu", RngStream(1, 2).derive(StreamTag.INIT))
        np.testing.assert_array_equal(a.layers[0].weight, b.layers[0].weight)

    def test_zero_biases(self):
        """Test biases start at exactly zero."""
        model = init_model([5, 4, 3], "relu", RngStream(0))
        for layer in model.layers:
            assert not np.any(layer.bias)

    def test_final_layer_affine(self):
        """Test hidden layers use the activation and the last layer is identity."""
        model = init_model([5, 4, 3], "tanh", RngStream(0))
        assert [layer.activation.kind for layer in model.layers] == ["tanh", "identity"]

    def test_linear_classifier_shape(self):
        """Test a 3072 -> 100 classifier has a 100 x 3072 weight matrix."""
        model = init_model([3072, 100], "relu", RngStream(0))
        assert model.depth == 1
        assert model.layers[0].weight.shape == (100, 3072)

    def test_init_scale_zero(self):
        """Test init_scale 0 gives an all-zero model."""
        model = init_model([6, 3], "identity", RngStream(0), init_scale=0.0)
        assert not np.any(model.layers[0].weight)

    def test_he_variance(self):
        """Test weights follow N(0, 2 / fan_in)."""
        model = init_model([400, 300], "relu", RngStream(9))
        assert np.var(model.layers[0].weight) == pytest.approx(2.0 / 400, rel=0.02)

    def test_metadata(self):
        """Test seed, stream and arch tag are recorded."""
        model = init_model([4, 3], "relu", RngStream(8, 6))
        assert (model.meta.seed, model.meta.stream_id) == (8, 6)
        assert model.meta.arch_tag == "relu-4x3"

    @pytest.mark.parametrize("arch", [[4], [4, 0, 3], [-1, 2]])
    def test_bad_arch(self, arch):
        """Test fewer than two widths or a non-positive width raise DomainError."""
        with pytest.raises(DomainError):
            init_model(arch, "relu", RngStream(0))


class TestModelValidation:
    """Tests for Model and Layer invariants."""

    def test_dimensions_must_chain(self):
        """Test non-chaining layers are rejected."""
        with pytest.raises(ValueError):
            model_from_arrays([np.eye(2), np.ones((2, 3))])

    def test_final_layer_must_be_affine(self):
        """Test a nonlinear final layer is rejected."""
        with pytest.raises(ValueError):
            model_from_arrays([np.eye(2)], activations=["relu"])

    def test_bias_shape(self):
        """Test a bias of the wrong length is rejected."""
        with pytest.raises(ValueError):
            Layer(weight=np.eye(2), bias=np.zeros(3))

    def test_needs_layers(self):
        """Test an empty model is rejected."""
        with pytest.raises(ValueError):
            Model(layers=())

    def test_with_parameters_keeps_activations(self):
        """Test parameter replacement keeps structure and updates metadata."""
        model = init_model([3, 2, 2], "relu", RngStream(0))
        copy = model.with_parameters(
            [np.zeros((2, 3)), np.zeros((2, 2))], [np.ones(2), np.ones(2)], config_hash="abc"
        )
        assert architecture_signature(copy) == architecture_signature(model)
        assert copy.meta.config_hash == "abc"
        assert model.meta.config_hash == ""


class TestForward:
    """Tests for forward."""

    def test_identity_network(self):
        """Test W = I, b = 0 returns the input as logits."""
        model = model_from_arrays([np.eye(3)])
        x = np.array([[1.0, -2.0, 3.0]])
        np.testing.assert_array_equal(forward(model, x).logits, x)

    def test_relu_layer(self):
        """Test ReLU zeroes negative pre-activations."""
        model = model_from_arrays([np.eye(2), np.eye(2)], activations=["relu", "identity"])
        trace = forward(model, np.array([-1.0, 2.0]))
        assert trace.outputs[0].tolist() == [[0.0, 2.0]]

    def test_hand_computed_two_layer(self):
        """Test a hand-set 2-layer net against manual arithmetic."""
        model = model_from_arrays(
            [[[1, 2], [-3, 1]], [[1, -1], [2, 0]]],
            biases=[[0, 1], [0.5, 0]],
            activations=["relu", "identity"],
        )
        # z1 = [1+2, -3+1+1] = [3, -1] -> relu [3, 0]; logits = [3+0.5, 6]
        trace = forward(model, np.array([[1.0, 1.0]]))
        np.testing.assert_array_equal(trace.preactivations[0], [[3.0, -1.0]])
        np.testing.assert_array_equal(trace.features, [[3.0, 0.0]])
        np.testing.assert_array_equal(trace.logits, [[3.5, 6.0]])

    def test_features_of_linear_model_are_inputs(self):
        """Test a single-layer model exposes its input as features."""
        model = model_from_arrays([np.ones((2, 3))])
        x = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(forward(model, x).features, x)

    def test_shape_mismatch(self):
        """Test a wrong input width raises DimensionError."""
        model = model_from_arrays([np.eye(3)])
        with pytest.raises(DimensionError):
            forward(model, np.ones((1, 4)))


class TestTemplates:
    """Tests for template_rows and template_alignment."""

    def test_rows_are_weight(self):
        """Test rows are the classifier weight matrix."""
        w = np.arange(8, dtype=float).reshape(2, 4)
        np.testing.assert_array_equal(template_rows(model_from_arrays([w])), w)

    def test_untrained_rows_equal_init(self):
        """Test a fresh classifier's rows are its init draws."""
        model = init_model([4, 2], "identity", RngStream(3))
        np.testing.assert_array_equal(template_rows(model), model.layers[0].weight)

    def test_multi_layer_rejected(self):
        """Test templates of a hidden-layer model raise UnsupportedArchitectureError."""
        model = init_model([4, 3, 2], "relu", RngStream(0))
        with pytest.raises(UnsupportedArchitectureError):
            template_rows(model)

    def test_alignment_ignores_shared_offset(self):
        """Test adding one vector to every row leaves alignment perfect."""
        prototypes = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        rows = 2.0 * prototypes + np.array([0.3, -0.7, 5.0])
        alignment = template_alignment(model_from_arrays([rows]), prototypes)
        assert alignment.min_cosine == pytest.approx(1.0)
        assert alignment.all_matched
        assert alignment.meets_floor()

    def test_plain_cosines_see_the_offset(self):
        """Test raw-row cosines drop under a shared offset while centered ones do not."""
        prototypes = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        rows = prototypes + np.array([0.0, 0.0, 3.0])
        alignment = template_alignment(model_from_arrays([rows]), prototypes)
        # row 0 is [1, 0, 3]
        assert alignment.plain_cosines[0] == pytest.approx(1.0 / np.sqrt(10.0))
        assert alignment.plain_cosines[2] == pytest.approx(1.0)
        assert alignment.min_cosine == pytest.approx(1.0)
        assert alignment.min_plain_cosine < 0.5

    def test_floor(self):
        """Test the floor needs both matching and a high enough centered cosine."""
        prototypes = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        rows = prototypes + 0.8 * prototypes[[1, 2, 0]]
        alignment = template_alignment(model_from_arrays([rows]), prototypes)
        assert alignment.all_matched
        assert alignment.min_cosine < TEMPLATE_COSINE_FLOOR
        assert not alignment.meets_floor()
        assert alignment.meets_floor(floor=alignment.min_cosine)

    def test_alignment_detects_swap(self):
        """Test swapped rows are not matched."""
        prototypes = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        rows = prototypes[[1, 0, 2]]
        alignment = template_alignment(model_from_arrays([rows]), prototypes)
        assert alignment.best_match == [1, 0, 2]
        assert not alignment.all_matched


class TestNetworkInequalities:
    """Tests for the scaling, norm-chain and inner-product facts the bounds build on."""

    @seed(1729)
    @settings(max_examples=100, deadline=None)
    @given(
        st.integers(0, 2**32 - 1),
        st.lists(st.integers(1, 6), min_size=0, max_size=3),
        st.floats(0.1, 10.0),
    )
    def test_bias_free_relu_net_is_homogeneous(self, stream_seed, hidden, c):
        """Test scaling every layer by c scales a bias-free ReLU net's logits by c**depth."""
        rng = RngStream(stream_seed)
        model = init_model([4, *hidden, 3], "relu", rng.derive(StreamTag.INIT), use_bias=False)
        x = sample_gaussian(rng.derive(StreamTag.INPUTS), (5, 4))
        base = forward(model, x).logits
        scaled = forward(scale_weights(model, c), x).logits
        expected = c**model.depth * base
        scale_of = max(1.0, float(np.max(np.abs(expected))))
        np.testing.assert_allclose(scaled, expected, rtol=1e-9, atol=1e-12 * scale_of)

    @seed(2718)
    @settings(max_examples=100, deadline=None)
    @given(
        st.integers(0, 2**32 - 1),
        st.sampled_from(["identity", "relu", "tanh"]),
        st.lists(st.integers(1, 6), min_size=1, max_size=3),
    )
    def test_layer_output_norm_chain(self, stream_seed, kind, hidden):
        """Test ||y_m|| <= s1(W_m) ||y_(m-1)|| + ||b_m|| per layer and row, with biases."""
        rng = RngStream(stream_seed)
        model = init_model([4, *hidden, 3], kind, rng.derive(StreamTag.INIT))
        biases = [
            sample_gaussian(rng.derive(100 + i), layer.out_features)
            for i, layer in enumerate(model.layers)
        ]
        model = model.with_parameters([layer.weight for layer in model.layers], biases)
        trace = forward(model, sample_gaussian(rng.derive(StreamTag.INPUTS), (6, 4)))
        previous = trace.inputs
        for layer, output in zip(model.layers, trace.outputs):
            bound = (
                top_singular_value(layer.weight) * np.linalg.norm(previous, axis=1)
                + np.linalg.norm(layer.bias)
            )
            assert np.all(np.linalg.norm(output, axis=1) <= bound * (1 + 1e-9) + 1e-12)
            previous = output

    @seed(3141)
    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 64))
    def test_inner_product_is_norms_times_cosine(self, stream_seed, dim):
        """Test a classifier logit w.x equals ||w|| ||x|| cos(w, x)."""
        rng = RngStream(stream_seed)
        w = sample_gaussian(rng.derive(1), (1, dim))
        x = sample_gaussian(rng.derive(2), dim)
        logit = float(forward(model_from_arrays([w], biases=[np.zeros(1)]), x).logits[0, 0])
        norms = float(np.linalg.norm(w) * np.linalg.norm(x))
        assert logit == pytest.approx(norms * cosine_similarity(w, x), rel=1e-9, abs=1e-12 * norms)


class TestHelpers:
    """Tests for signature and parameter counting."""

    def test_parameter_count(self):
        """Test weights plus biases are counted."""
        model = init_model([4, 3, 2], "relu", RngStream(0))
        assert parameter_count(model) == 4 * 3 + 3 + 3 * 2 + 2

    def test_meta_defaults(self):
        """Test metadata defaults are empty provenance."""
        meta = ModelMeta()
        assert meta.constituents == []
        assert meta.use_bias is True
