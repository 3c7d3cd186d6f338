"""Shared fixtures: seeded surrogate instances and cached desk-scale results."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracle_utils import make_gp_instance  # noqa: E402


@pytest.fixture(scope="session")
def instances10():
    """The ten seeded d=1 surrogate instances used by the oracle-agreement tests."""
    return [make_gp_instance(seed) for seed in range(10)]


@pytest.fixture(scope="session")
def results_dir():
    path = Path(__file__).resolve().parent.parent / "results"
    path.mkdir(exist_ok=True)
    return path


def rng_for(*key):
    return np.random.default_rng(np.random.SeedSequence(key))
