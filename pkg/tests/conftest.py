import numpy as np
import pytest

from expertnmt.model import ModelConfig, init_params


def random_model(V=12, d=4, seed=0, scale=0.5, **kw):
    """Small model with weights spread wider than the default init."""
    kw.setdefault("dropout", 0.0)
    params = init_params(ModelConfig(V, d=d, **kw), seed)
    rng = np.random.default_rng(seed + 1000)
    for t in params.tensors.values():
        t += rng.uniform(-scale, scale, size=t.shape)
    return params


@pytest.fixture
def tiny_model():
    return random_model()
