import os
import sys
from pathlib import Path

import numpy as np
import pytest

SRC = Path(__file__).resolve().parent.parent / "src"
sys.path.insert(0, str(SRC))

# Keep test runs from writing a log file next to the sources.
os.environ.setdefault("DSRAN_LOG_FILE", "")
os.environ.setdefault("DSRAN_LOG_LEVEL", "WARNING")

from config import RunConfig, with_model, with_train  # noqa: E402
from model.featurestore import SyntheticSpec, generate_synthetic, synthetic_dataset  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return SyntheticSpec(seed=3, n_items=6, n=5, k=4, D_o=10, vocab_size=30, m=6, captions_per_image=2)


@pytest.fixture
def small_data(small_spec):
    return synthetic_dataset(small_spec)


@pytest.fixture
def small_config(small_data):
    """A tiny resolved configuration that trains in well under a second per epoch."""
    manifest, _ = small_data
    cfg = RunConfig()
    cfg = with_model(cfg, feature_dim=manifest.feature_dim, vocab_size=manifest.vocab_size,
                     embed_dim=8, word_dim=6, heads=2)
    return with_train(cfg, epochs=3, batch_size=3, seed=5).validate()


@pytest.fixture
def dataset_dir(tmp_path, small_spec):
    out = tmp_path / "data"
    generate_synthetic(small_spec, out)
    return out
