import numpy as np
import pytest

from synclip.corpus import synth_toy_corpus, toy_window_config


@pytest.fixture(scope="session")
def toy_cfg():
    return toy_window_config()


@pytest.fixture(scope="session")
def toy_corpus(toy_cfg):
    return synth_toy_corpus(toy_cfg, 6, seed=123, n_frames=60)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
