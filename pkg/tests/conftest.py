import numpy as np
import pytest

from lavender.teacher import make_split, task_vocab
from lavender.vlm import ToyVLM, VlmConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def vocab():
    return task_vocab()


@pytest.fixture(scope="session")
def small_split():
    return make_split(64, 32, seed=3)


def tiny_model(vocab_size, seed=0, dtype="float64", **kw):
    cfg = dict(d_model=8, n_heads=2, n_layers=2, cross_layer_indices=(1,), vocab_size=vocab_size, dtype=dtype)
    cfg.update(kw)
    return ToyVLM.init(VlmConfig(**cfg), seed)


# verdict lines from the acceptance suite, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
