import numpy as np
import pytest

from propvis.config import RunConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    """Narrow model that keeps unit tests quick; same layout as the defaults."""
    return RunConfig(stem_hidden=64, coarse_hidden=64, encoder_hidden=64, decoder_hidden=64, aligner_hidden=64)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
