import numpy as np
import pytest

from flowssc.tensor import precision, reset_graph


@pytest.fixture
def f64():
    with precision(np.float64):
        yield
    reset_graph()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _fresh_graph():
    reset_graph()
    yield
    reset_graph()


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
