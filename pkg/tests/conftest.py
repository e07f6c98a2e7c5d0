import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from neuronscope.model_io import TINY_CONFIG, WordTokenizer, synth_model, synth_vocabulary  # noqa: E402


@pytest.fixture(scope="session")
def tiny():
    """L=2, d=8, H=2, N=16, B=50, seed 42, float64."""
    return synth_model(42, TINY_CONFIG, precision="wide")


@pytest.fixture(scope="session")
def tiny32():
    return synth_model(42, TINY_CONFIG, precision="standard")


@pytest.fixture(scope="session")
def words():
    return WordTokenizer(synth_vocabulary(TINY_CONFIG.vocab_size))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
