import numpy as np
import pytest

from gatecap.gradients import small_config
from gatecap.model import init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    """Small tanh model with non-zero biases so every term is exercised."""
    cfg = small_config("tanh")
    params = init_params(cfg, 3)
    r = np.random.default_rng(3)
    for name, arr in params.items():
        if arr.ndim == 1:
            arr[...] = r.uniform(-0.5, 0.5, size=arr.shape)
    return cfg, params
