"""
Tests for training/trainer.py - SGD training, evaluation and gradient checks
"""

import math

import numpy as np
import pytest

import merge_lab.training.trainer as trainer
from merge_lab.data.synth import LabeledSet
from merge_lab.errors import DimensionError, DomainError, TrainingDivergedError
from merge_lab.models.zoo import init_model, model_from_arrays
from merge_lab.tensor.core import RngStream, StreamTag
from merge_lab.training.trainer import (
    TrainConfig,
    accuracy_from_logits,
    evaluate,
    gradient_check,
    loss_and_gradients,
    softmax_cross_entropy,
    train,
    train_pool,
)


def random_batch(n_classes=3, dim=5, size=8, seed=0):
    gen = np.random.default_rng(seed)
    return LabeledSet(
        images=gen.uniform(0.0, 1.0, size=(size, dim)),
        labels=np.arange(size) % n_classes,
        n_classes=n_classes,
    )


def two_blobs(per_class, seed):
    """Two Gaussian blobs in the plane, centered at (-2, -2) and (2, 2) with std 0.5."""
    gen = np.random.default_rng(seed)
    centers = np.array([[-2.0, -2.0], [2.0, 2.0]])
    labels = np.repeat([0, 1], per_class)
    return LabeledSet(
        images=centers[labels] + gen.normal(0.0, 0.5, size=(2 * per_class, 2)),
        labels=labels,
        n_classes=2,
    )


class TestTrainConfig:
    """Tests for TrainConfig."""

    def test_step_decay(self):
        """Test the rate drops by the factor every lr_decay_every epochs."""
        cfg = TrainConfig(lr=0.1, lr_decay_factor=0.1, lr_decay_every=20)
        assert cfg.lr_at(0) == 0.1
        assert cfg.lr_at(19) == 0.1
        assert cfg.lr_at(20) == pytest.approx(0.01)
        assert cfg.lr_at(45) == pytest.approx(0.001)

    def test_config_hash(self):
        """Test the hash is short, stable and sensitive to settings."""
        a = TrainConfig(lr=0.01).config_hash()
        assert len(a) == 12
        assert a == TrainConfig(lr=0.01).config_hash()
        assert a != TrainConfig(lr=0.02).config_hash()

    def test_invalid_momentum(self):
        """Test momentum must lie in [0, 1)."""
        with pytest.raises(ValueError):
            TrainConfig(momentum=1.0)


class TestLossAndAccuracy:
    """Tests for softmax_cross_entropy, accuracy_from_logits and evaluate."""

    def test_uniform_logits_loss(self):
        """Test equal logits give loss log(K)."""
        loss, probs = softmax_cross_entropy(np.zeros((2, 4)), np.array([0, 3]))
        assert loss == pytest.approx(math.log(4))
        np.testing.assert_allclose(probs, 0.25)

    def test_large_logits_stay_finite(self):
        """Test the max shift keeps huge logits finite."""
        loss, _ = softmax_cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_accuracy_ties_go_to_lowest_index(self):
        """Test argmax ties pick the first class."""
        assert accuracy_from_logits(np.array([[1.0, 1.0]]), np.array([0])) == 1.0
        assert accuracy_from_logits(np.array([[1.0, 1.0]]), np.array([1])) == 0.0

    def test_accuracy_of_empty_set(self):
        """Test an empty label array raises DomainError."""
        with pytest.raises(DomainError):
            accuracy_from_logits(np.zeros((0, 2)), np.zeros(0, dtype=int))

    def test_evaluate_empty_set(self):
        """Test evaluating on an empty set raises DomainError."""
        model = model_from_arrays([np.eye(2)])
        empty = LabeledSet(images=np.zeros((0, 2)), labels=np.zeros(0, dtype=np.int64), n_classes=2)
        with pytest.raises(DomainError):
            evaluate(model, empty)

    def test_evaluate_perfect_classifier(self):
        """Test an identity classifier on one-hot inputs is always right."""
        labeled = LabeledSet(images=np.eye(3), labels=np.array([0, 1, 2]), n_classes=3)
        result = evaluate(model_from_arrays([10.0 * np.eye(3)]), labeled)
        assert result.accuracy == 1.0
        assert result.mean_loss < 1e-3


class TestGradientCheck:
    """Tests for backprop against finite differences."""

    def test_relu_mlp(self):
        """Test a ReLU MLP's gradients within 1e-4 relative error."""
        model = init_model([5, 6, 3], "relu", RngStream(4).derive(StreamTag.INIT))
        model = model.with_parameters(
            [layer.weight for layer in model.layers],
            [np.full(6, 0.1), np.array([0.1, -0.2, 0.05])],
        )
        assert gradient_check(model, random_batch()) <= 1e-4

    def test_tanh_mlp(self):
        """Test a smooth two-hidden-layer net."""
        model = init_model([5, 4, 4, 3], "tanh", RngStream(6))
        assert gradient_check(model, random_batch(seed=2)) <= 1e-4

    @pytest.mark.parametrize("loss", ["cross_entropy", "squared"])
    def test_linear_model(self, loss):
        """Test a linear classifier's gradients within 1e-6 relative error."""
        model = init_model([5, 3], "identity", RngStream(7))
        assert gradient_check(model, random_batch(seed=3), loss=loss) <= 1e-6

    def test_squared_loss_gradient_by_hand(self):
        """Test the squared loss against a hand-derived gradient."""
        model = model_from_arrays([[[1.0, 0.0], [0.0, 1.0]]], biases=[[0.0, 0.0]])
        x = np.array([[2.0, 3.0]])
        value, grad_w, grad_b = loss_and_gradients(
            [model.layers[0].weight], [model.layers[0].bias], [model.layers[0].activation],
            x, np.array([0]), loss="squared",
        )
        # diff = [2 - 1, 3 - 0] = [1, 3]
        assert value == pytest.approx(0.5 * (1 + 9))
        np.testing.assert_allclose(grad_w[0], [[2.0, 3.0], [6.0, 9.0]])
        np.testing.assert_allclose(grad_b[0], [1.0, 3.0])

    def test_too_many_parameters(self):
        """Test models above the size limit raise DomainError."""
        model = init_model([40, 30, 3], "relu", RngStream(0))
        with pytest.raises(DomainError):
            gradient_check(model, random_batch(dim=40))

    def test_step_comes_from_settings(self, monkeypatch):
        """Test the finite-difference step defaults to gradient_check_eps."""
        requested = []

        def fake_config_value(key, default=None):
            requested.append((key, default))
            return 1e-7

        monkeypatch.setattr(trainer, "get_config_value", fake_config_value)
        model = init_model([5, 3], "identity", RngStream(7))
        assert gradient_check(model, random_batch(seed=3)) <= 1e-4
        assert requested == [("gradient_check_eps", 1e-5)]

        requested.clear()
        gradient_check(model, random_batch(seed=3), eps=1e-4)
        assert requested == []

    def test_step_must_be_positive(self, monkeypatch):
        """Test a zero step from the settings raises DomainError."""
        monkeypatch.setattr(trainer, "get_config_value", lambda key, default=None: 0.0)
        with pytest.raises(DomainError, match="step"):
            gradient_check(init_model([5, 3], "identity", RngStream(7)), random_batch())


class TestTrain:
    """Tests for train."""

    def test_loss_decreases(self, tiny_pool_results):
        """Test the last epoch's loss is below the first."""
        for _, log in tiny_pool_results:
            assert len(log.train_loss) == 4
            assert log.train_loss[-1] < log.train_loss[0]

    def test_learns_the_task(self, tiny_pool_results):
        """Test trained models clearly beat chance on validation."""
        for _, log in tiny_pool_results:
            assert log.final_val_accuracy >= 0.5
            assert log.final_test_accuracy is not None

    def test_separates_two_blobs(self):
        """Test a linear classifier with the default settings learns two separated blobs."""
        model = init_model([2, 2], "identity", RngStream(0).derive(StreamTag.INIT))
        train_set, val_set = two_blobs(200, seed=1), two_blobs(100, seed=2)
        trained, log = train(model, train_set, val_set, TrainConfig(epochs=50))
        assert log.final_val_accuracy >= 0.95
        assert evaluate(trained, two_blobs(100, seed=3)).accuracy >= 0.95

    def test_full_batch_convex_loss_never_increases(self):
        """Test plain full-batch descent on a linear classifier lowers the loss every epoch."""
        model = init_model([2, 2], "identity", RngStream(1).derive(StreamTag.INIT))
        cfg = TrainConfig(lr=0.05, momentum=0.0, lr_decay_factor=1.0, epochs=50, full_batch=True)
        _, log = train(model, two_blobs(100, seed=4), two_blobs(20, seed=5), cfg)
        assert len(log.train_loss) == 50
        for before, after in zip(log.train_loss, log.train_loss[1:]):
            assert after <= before + 1e-12

    def test_deterministic(self, tiny_data, fast_train_config):
        """Test training the same model twice is bit-identical."""
        model = init_model([36, 8, 3], "relu", RngStream(1, 0).derive(StreamTag.INIT))
        a, _ = train(model, tiny_data.train, tiny_data.val, fast_train_config)
        b, _ = train(model, tiny_data.train, tiny_data.val, fast_train_config)
        for la, lb in zip(a.layers, b.layers):
            np.testing.assert_array_equal(la.weight, lb.weight)
            np.testing.assert_array_equal(la.bias, lb.bias)

    def test_records_config_hash(self, tiny_models, fast_train_config):
        """Test trained models carry the config hash."""
        assert tiny_models[0].meta.config_hash == fast_train_config.config_hash()

    def test_zero_epochs_returns_model(self, tiny_data):
        """Test zero epochs leaves the model untouched."""
        model = init_model([36, 3], "identity", RngStream(0))
        trained, log = train(model, tiny_data.train, tiny_data.val, TrainConfig(epochs=0))
        assert trained is model
        assert log.train_loss == []

    def test_first_full_batch_step(self, tiny_data):
        """Test one full-batch epoch is a single plain gradient step."""
        model = init_model([36, 3], "identity", RngStream(2))
        cfg = TrainConfig(lr=0.1, momentum=0.9, epochs=1, full_batch=True)
        trained, _ = train(model, tiny_data.train, tiny_data.val, cfg)
        _, grad_w, grad_b = loss_and_gradients(
            [model.layers[0].weight], [model.layers[0].bias], [model.layers[0].activation],
            tiny_data.train.images, tiny_data.train.labels,
        )
        np.testing.assert_allclose(trained.layers[0].weight, model.layers[0].weight - 0.1 * grad_w[0], atol=1e-12)
        np.testing.assert_allclose(trained.layers[0].bias, -0.1 * grad_b[0], atol=1e-12)

    def test_bias_free_model_keeps_zero_bias(self, tiny_data):
        """Test biases are not trained when use_bias is off."""
        model = init_model([36, 4, 3], "relu", RngStream(3), use_bias=False)
        trained, _ = train(model, tiny_data.train, tiny_data.val, TrainConfig(epochs=2, lr=0.05))
        for layer in trained.layers:
            assert not np.any(layer.bias)

    def test_divergence(self, tiny_data):
        """Test an overflowing loss raises TrainingDivergedError."""
        model = model_from_arrays([np.full((3, 36), 1e308)], biases=[np.zeros(3)])
        with pytest.raises(TrainingDivergedError, match="epoch 0"):
            train(model, tiny_data.train, tiny_data.val, TrainConfig(epochs=1))

    def test_input_width_mismatch(self, tiny_data):
        """Test a model of the wrong input width raises DimensionError."""
        model = init_model([10, 3], "identity", RngStream(0))
        with pytest.raises(DimensionError):
            train(model, tiny_data.train, tiny_data.val, TrainConfig(epochs=1))


class TestTrainPool:
    """Tests for train_pool."""

    def test_stream_ids_in_order(self, tiny_models):
        """Test model i comes from stream i."""
        assert [m.meta.stream_id for m in tiny_models] == [0, 1, 2]
        assert all(m.meta.seed == 5 for m in tiny_models)

    def test_members_differ(self, tiny_models):
        """Test distinct streams give distinct models."""
        assert not np.array_equal(tiny_models[0].layers[0].weight, tiny_models[1].layers[0].weight)

    def test_threads_do_not_change_results(self, tiny_data, fast_train_config, tiny_models):
        """Test parallel training reproduces sequential training bit for bit."""
        parallel = train_pool([36, 8, 3], "relu", tiny_data, fast_train_config, master_seed=5,
                              pool_size=3, jobs=3)
        for (model, _), reference in zip(parallel, tiny_models):
            for la, lb in zip(model.layers, reference.layers):
                np.testing.assert_array_equal(la.weight, lb.weight)

    def test_stream_offset(self, tiny_data, fast_train_config, tiny_models):
        """Test an offset pool starts at the given stream."""
        (model, _), = train_pool([36, 8, 3], "relu", tiny_data, fast_train_config, master_seed=5,
                                 pool_size=1, stream_offset=2)
        np.testing.assert_array_equal(model.layers[0].weight, tiny_models[2].layers[0].weight)

    def test_empty_pool(self, tiny_data, fast_train_config):
        """Test pool_size 0 raises DomainError."""
        with pytest.raises(DomainError):
            train_pool([36, 3], "identity", tiny_data, fast_train_config, master_seed=0, pool_size=0)
