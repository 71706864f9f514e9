import shutil
from pathlib import Path

import numpy as np
import pytest

from core.models import HyperParams

FIXTURES = Path(__file__).parent / "fixtures"

collect_ignore = ["test_installation.py", "examples"]


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: empirical learning runs (deselect with -m 'not slow')")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_hyper():
    return HyperParams(
        k=2, num_features=2, num_categories=2, num_ratings=5, sigma=0.5,
        diversity_lower=1.0, diversity_upper=5.0,
        user_hidden=[3], item_hidden=[3], feature_hidden=[3], diversity_hidden=[3],
    )


@pytest.fixture
def toy_dir(tmp_path):
    """Writable copy of the toy fixtures (config, ratings, corpus)."""
    for name in ("toy_config.json", "toy_ratings.tsv", "toy_corpus.tsv"):
        shutil.copy(FIXTURES / name, tmp_path / name)
    return tmp_path
