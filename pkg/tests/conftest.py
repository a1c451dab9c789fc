import numpy as np
import pytest

from noiseflow.layers import ConditioningContext


def random_ctx(gen, n=2, shape=(4, 4, 4), isos=(100, 400, 800, 1600), cameras=3, amplified=False):
    return ConditioningContext(
        clean=gen.uniform(0, 1, (n,) + tuple(shape)),
        iso=gen.choice(isos, n),
        camera_id=gen.integers(0, cameras, n),
        gain_amplified=np.full(n, amplified),
    )


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


@pytest.fixture
def make_ctx(gen):
    def _make(n=2, shape=(4, 4, 4), **kw):
        return random_ctx(gen, n, shape, **kw)

    return _make


ACCEPTANCE_LINES = []


def pytest_addoption(parser):
    parser.addoption("--sidd", default=None, help="NFPATCH1 file converted from SIDD raw patches (optional)")


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
