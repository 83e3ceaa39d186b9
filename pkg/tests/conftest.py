import numpy as np
import pytest

from refedit.config import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    # Smallest config that still exercises every module (16px images -> 4x4 latents).
    return ModelConfig(latent_channels=2, base_width=8, level_count=2, T=8, batch_size=2, seed=0)
