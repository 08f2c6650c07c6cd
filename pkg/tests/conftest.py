"""
Pytest configuration and fixtures
"""
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

from src.encoders import ModelConfig
from src.synth_moinst import DatasetConfig, SynthDataset, build_dataset
from src.trainer import TrainConfig, pretrain

TINY_MODEL = ModelConfig(d=16, d_text=16, d_vision=16, n_text_layers=1, n_image_layers=2, n_heads=2, patch=16,
                         image_size=64, mlp_ratio=2)
SMALL_DATA = DatasetConfig(n_train=24, n_val=6, n_test=10, seed=17)


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="Run desk-scale acceptance runs and large statistical oracles")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config():
    """Smallest dual encoder that still runs on 64x64 scenes (16 patches)."""
    return TINY_MODEL


@pytest.fixture
def rng():
    return np.random.default_rng(17)


@pytest.fixture
def tmp_out():
    """Temporary output directory, removed afterwards."""
    out_dir = tempfile.mkdtemp()
    try:
        yield Path(out_dir)
    finally:
        shutil.rmtree(out_dir)


@pytest.fixture(scope="session")
def small_dataset_dir():
    """A 40-scene dataset generated once per test session."""
    data_dir = tempfile.mkdtemp()
    try:
        build_dataset(data_dir, SMALL_DATA)
        yield Path(data_dir)
    finally:
        shutil.rmtree(data_dir)


@pytest.fixture
def small_dataset(small_dataset_dir):
    return SynthDataset(small_dataset_dir)


@pytest.fixture(scope="session")
def tiny_backbone(small_dataset_dir):
    """Backbone checkpoint after a few pretraining steps on the small dataset."""
    config = TrainConfig(stage="pretrain", steps=3, batch_size=8, log_every=0, val_records=8)
    return pretrain(config, SynthDataset(small_dataset_dir), TINY_MODEL).checkpoint


@pytest.fixture
def config_dir():
    """Return the path to the test configuration directory"""
    return Path(__file__).parent / "config"
