import numpy as np
import pytest

from foldkit.harness import TrainConfig, build_network, make_synthetic_dataset, train


@pytest.fixture(scope="session")
def small_trained():
    """One small trained mlp_bn network shared by tests that need realistic
    weights and statistics but not a specific accuracy level."""
    splits = make_synthetic_dataset(class_count=5, dim=12, train_count=1024,
                                    test_count=512, calib_count=256, seed=0)
    net = build_network("mlp_bn", dim=12, class_count=5, width=24, seed=0)
    net, history = train(net, splits.train, TrainConfig(epochs=5, seed=0))
    return net, splits, history


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
