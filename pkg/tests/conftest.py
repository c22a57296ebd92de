import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nestnet.encoder import EncoderConfig  # noqa: E402
from nestnet.supernet import Grid  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return EncoderConfig(d_in=6, d_model=8, depth_max=2, ffn_max=8, heads=2, conv_kernel=3, vocab=5)


@pytest.fixture
def tiny_grid():
    return Grid((1, 2), (4, 8), (4, 8))


def pytest_terminal_summary(terminalreporter):
    from criteria import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
