import numpy as np
import pytest

from codemsd.data import GeneratorSpec, generate_dataset
from codemsd.model import ModelConfig

SMALL_DIMS = dict(I=4, P=3, L=5, V=20)


def small_spec(**kw) -> GeneratorSpec:
    base = dict(SMALL_DIMS, text_len=(1, 5), ocr_len=(0, 4), words_per_class=3, n_posts=24, seed=5)
    base.update(kw)
    return GeneratorSpec(**base)


def small_config(**kw) -> ModelConfig:
    base = dict(SMALL_DIMS, F=6, init_std=0.3)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def small_records():
    recs, _ = generate_dataset(small_spec())
    return recs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
