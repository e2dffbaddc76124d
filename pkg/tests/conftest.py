import numpy as np
import pytest

from pykv.model import ModelConfig, init_model


@pytest.fixture(scope="session")
def tiny_model():
    return init_model(ModelConfig(layers=4, heads=2, head_dim=16, vocab=64, seed=3, max_seq=1024))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
