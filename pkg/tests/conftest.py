import numpy as np
import pytest

from specfuse.pyramid import DONT_CARE


def random_labels(rng, h, w, num_classes, dont_care=0.0, blocky=None):
    """Random label map; ``blocky`` replicates a coarse grid so unity cells occur."""
    if blocky:
        small = rng.integers(0, num_classes, size=(h // blocky, w // blocky))
        y = np.repeat(np.repeat(small, blocky, 0), blocky, 1)
        flip = rng.uniform(size=y.shape) < 0.05
        y = np.where(flip, rng.integers(0, num_classes, size=y.shape), y)
    else:
        y = rng.integers(0, num_classes, size=(h, w))
    if dont_care:
        y = np.where(rng.uniform(size=y.shape) < dont_care, DONT_CARE, y)
    return y.astype(np.int64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
