import numpy as np
import pytest
import torch

from gridrl.model import ModelConfig, UnifiedModel
from gridrl.taskgen import split_objects
from gridrl.tensor import configure_runtime
from gridrl.vocab import default_vocabulary

configure_runtime(1)

TINY = dict(layers=1, d_model=16, heads=2)


@pytest.fixture(scope="session")
def vocab():
    return default_vocabulary()


@pytest.fixture(scope="session")
def objects(vocab):
    return split_objects(vocab, 0.25, np.random.default_rng(0))


def tiny_model(vocab, seed=0, **changes):
    return UnifiedModel(ModelConfig(**{**TINY, **changes}), vocab, seed=seed)


@pytest.fixture
def model(vocab):
    return tiny_model(vocab)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    from desk import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in VERDICTS:
            terminalreporter.write_line(line)
