"""
Pytest configuration and fixtures for Merge Lab tests.

Datasets and pools here are deliberately tiny (6x6 images, a handful of classes,
a few epochs) so the whole suite stays fast. Fixtures that train are session
scoped; models are immutable, so sharing them between tests is safe.
"""

import pytest

from merge_lab.data.synth import DatasetSpec, generate
from merge_lab.training.trainer import TrainConfig, train_pool


@pytest.fixture(autouse=True)
def clear_config_cache_fixture():
    """Clear the settings cache before each test to prevent test pollution."""
    from merge_lab.utils.config import clear_config_cache
    clear_config_cache()
    yield
    clear_config_cache()


@pytest.fixture(scope="session")
def tiny_spec():
    """A 3-class 6x6 grayscale task."""
    return DatasetSpec(
        n_classes=3,
        height=6,
        width=6,
        train_per_class=24,
        val_per_class=10,
        test_per_class=12,
        noise_std=0.05,
        brightness_jitter=0.1,
        seed=11,
    )


@pytest.fixture(scope="session")
def tiny_data(tiny_spec):
    return generate(tiny_spec)


@pytest.fixture(scope="session")
def fast_train_config():
    """Few epochs of momentum SGD."""
    return TrainConfig(lr=0.05, momentum=0.9, epochs=4, batch_size=16, seed=0)


@pytest.fixture(scope="session")
def tiny_pool_results(tiny_data, fast_train_config):
    """Three trained one-hidden-layer ReLU models with their logs."""
    return train_pool([36, 8, 3], "relu", tiny_data, fast_train_config, master_seed=5, pool_size=3)


@pytest.fixture(scope="session")
def tiny_models(tiny_pool_results):
    return [model for model, _ in tiny_pool_results]


def write_experiment(path, **settings):
    """Write a key=value experiment file and return its path."""
    lines = []
    for key, value in settings.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    path.write_text("\n".join(lines) + "\n")
    return path


# Small harness runs: 3 classes of 6x6 images, a 2- or 3-model pool, a few epochs
SMALL_EXPERIMENT = {
    "n_classes": 3,
    "height": 6,
    "width": 6,
    "train_per_class": 16,
    "val_per_class": 8,
    "test_per_class": 10,
    "hidden_widths": [8],
    "epochs": 3,
    "batch_size": 16,
    "lr": 0.05,
    "pool_size": 3,
    "factor_grid": [1, 50],
    "scatter_batch_size": 10,
    "taus": [1, 2],
    "bound_width": 6,
    "bound_depth": 2,
    "bound_trials": 150,
    "theorem_trials": 300,
    "variance_trials": 20000,
    "fuzz_pairs": 100,
}


@pytest.fixture
def small_experiment():
    """A copy of the small harness settings that tests may modify."""
    return dict(SMALL_EXPERIMENT)


@pytest.fixture
def make_experiment(tmp_path, small_experiment):
    """Factory writing the small settings, with overrides, to an experiment file."""
    def _make(name="experiment.cfg", **overrides):
        return write_experiment(tmp_path / name, **{**small_experiment, **overrides})
    return _make
