"""
Shared fixtures: a tiny CONV/FC network on 10x10 synthetic images and the
desk-scale MNIST switch (``slow`` tests run only when ADMM_NN_DATA_DIR is set).
"""

import os
import sys
from pathlib import Path

import pytest
import torch

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from models.network import ConvNet, LayerSpec
from training.mnist_idx import DATA_DIR_ENV, synthetic_dataset
from training.trainer import TrainConfig

TINY_SPECS = (
    LayerSpec("conv1", "conv", 1, 4, kernel=3, padding=1, pooling="max2"),
    LayerSpec("fc1", "fc", 100, 10, activation="none"),
)
TINY_INPUT = (1, 10, 10)


def tiny_net(seed: int = 0, dtype: torch.dtype = torch.float64) -> ConvNet:
    torch.manual_seed(seed)
    return ConvNet(TINY_SPECS, TINY_INPUT, arch="tiny").to(dtype)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale MNIST runs (need ADMM_NN_DATA_DIR)")


@pytest.fixture
def tiny_model():
    return tiny_net()


@pytest.fixture(scope="module")
def tiny_dataset():
    return synthetic_dataset(n_train=96, n_test=64, image_size=10, seed=0)


@pytest.fixture
def fast_config():
    return TrainConfig(learning_rate=0.05, momentum=0.9, batch_size=32, epochs=2, seed=0)


@pytest.fixture(scope="session")
def mnist_dir():
    directory = os.environ.get(DATA_DIR_ENV)
    if not directory or not Path(directory).is_dir():
        pytest.skip(f"{DATA_DIR_ENV} not set; desk-scale MNIST tests skipped")
    return Path(directory)
