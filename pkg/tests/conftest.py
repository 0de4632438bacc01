"""
Shared pytest fixtures for reprocs
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Repository root on sys.path so `import reprocs` works without installing
ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from reprocs.core.linalg import BasisMatrix  # noqa: E402
from reprocs.core.settings import reset_tolerances  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow Monte-Carlo tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte-Carlo runs, skipped without --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def random_basis(rng: np.random.Generator, n: int, r: int) -> BasisMatrix:
    """Orthonormalized Gaussian n x r basis"""
    return BasisMatrix.orthonormalize(rng.standard_normal((n, r)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _fresh_tolerances():
    reset_tolerances()
    yield
    reset_tolerances()
