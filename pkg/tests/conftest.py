import numpy as np
import pytest

from tokenmark.model import ModelConfig, init_weights
from tokenmark.rng import make_rng


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(n_layers=2, d=8, n_heads=2, d_mlp=16, vocab_size=64, max_seq_len=16)


@pytest.fixture
def tiny_weights(tiny_config):
    return init_weights(tiny_config, make_rng(0, "test-init"))


# acceptance lines are collected here and printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
