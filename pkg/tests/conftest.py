import numpy as np
import pytest

from gslora.model import ModelConfig, init_model

TINY = ModelConfig(num_blocks=2, model_dim=8, num_heads=2, ffn_hidden_dim=6, seq_len=3, input_dim=4,
                   num_classes=3, dropout=0.0)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    return init_model(TINY, seed=0)


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(123)
    return rng.standard_normal((5, TINY.seq_len, TINY.input_dim)), rng.integers(0, TINY.num_classes, 5)
