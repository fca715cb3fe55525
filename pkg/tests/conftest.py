import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from layerdrop.config import ModelConfig
from layerdrop.data import gen_synthetic
from layerdrop.model import init_params
from layerdrop.numcore import Rng

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def tiny_cfg():
    return ModelConfig(n_layers=4, d_model=16, n_heads=2, d_ffn=32, vocab_size=32, max_seq_len=12)


@pytest.fixture
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, Rng(7))


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture(scope="session")
def zipf_corpus():
    return gen_synthetic("zipf_bigram", 4000, 3)


def random_tokens(rng: Rng, vocab: int, shape) -> np.ndarray:
    return rng.integers(vocab, shape)


# acceptance criteria report one line each; printed at the end of the run
_CRITERIA_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    def record(label: str, passed: bool, detail: str = "") -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  {label}" + (f"  ({detail})" if detail else "")
        _CRITERIA_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA_LINES:
            terminalreporter.write_line(line)
