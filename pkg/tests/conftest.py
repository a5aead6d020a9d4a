"""Shared fixtures: frozen benchmark datasets and trainer configs.

The two synthetic benchmarks below are calibrated and frozen; the ordering
and learnability tests depend on these exact seeds and hyperparameters.
"""

import pytest

from lpxmc.data import SyntheticSpec, generate_synthetic
from lpxmc.trainer import TrainConfig


# Easy, near-separable set: every format that trains at all should ace it.
EASY_SPEC = SyntheticSpec(
    num_samples=640, num_features=32, num_labels=32,
    mean_labels=1.0, min_labels=1, noise=0.05, seed=7,
)
EASY_CFG = TrainConfig(
    hidden=64, embed_dim=32, head_lr=0.3, encoder_lr=3e-3,
    epochs=25, batch_size=32, chunks=1, seed=1,
)

# Harder set: noisy enough that coarse grids visibly lose accuracy, which is
# what the rounding/format ordering assertions need.
HARD_SPEC = SyntheticSpec(
    num_samples=768, num_features=32, num_labels=64,
    mean_labels=1.0, min_labels=1, noise=0.3, seed=7,
)
HARD_CFG = TrainConfig(
    hidden=64, embed_dim=32, head_lr=0.05, encoder_lr=1e-3,
    epochs=15, batch_size=32, chunks=1, seed=1,
)


@pytest.fixture(scope="session")
def easy_dataset():
    return generate_synthetic(EASY_SPEC)


@pytest.fixture(scope="session")
def hard_dataset():
    return generate_synthetic(HARD_SPEC)
