import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tvnet.core import Config  # noqa: E402
from tvnet.synthdata import build_corpus  # noqa: E402


@pytest.fixture(scope="session")
def small_corpus():
    return build_corpus(12, 6, 16, seed=3, planted_fraction=0.5)


@pytest.fixture
def tiny_config():
    """32x32 images and narrow layers so forward/backward passes are cheap."""
    return Config(
        image_size=32,
        level_sizes=(16, 8, 4, 4, 4),
        level_widths=(4, 8, 8, 8, 8),
        embed_dim=8,
        lang_hidden=8,
        d_s=8,
        d_m=8,
        max_iter=20,
    )


@pytest.fixture(scope="session")
def tiny_corpus():
    return build_corpus(6, 4, 8, seed=5, planted_fraction=1.0, image_size=32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import lines

    out = lines()
    if out:
        terminalreporter.section("acceptance criteria")
        for line in out:
            terminalreporter.write_line(line)
