from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from rankicc import ClusteredDataset, ThreeLevelDataset, WeightAssignment  # noqa: E402

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_two_level(rng, n_max=12, k_max=7, levels=6, n_min=2):
    """Random two-level dataset with heavy ties (integer values in ``0..levels-1``)."""
    n = int(rng.integers(n_min, n_max + 1))
    k = rng.integers(2, k_max + 1, n)
    x = rng.integers(0, levels, int(k.sum())).astype(float)
    return ClusteredDataset(x, k)


def random_three_level(rng, n_max=8, ni_max=4, m_max=3, levels=6):
    n = int(rng.integers(2, n_max + 1))
    ni = rng.integers(2, ni_max + 1, n)
    m = rng.integers(1, m_max + 1, int(ni.sum()))
    x = rng.integers(0, levels, int(m.sum())).astype(float)
    return ThreeLevelDataset(x, m, ni)


def random_weights(rng, N):
    return WeightAssignment.normalized(rng.random(N) + 0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
