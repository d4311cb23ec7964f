import numpy as np
import pytest

from criteria import LINES
from smallnoise.catalog import builtin_problem


def pytest_terminal_summary(terminalreporter):
    if not LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


@pytest.fixture
def lg():
    return builtin_problem("linear_gaussian")


@pytest.fixture
def ou():
    return builtin_problem("ou_quadratic")


@pytest.fixture
def exit_problem():
    return builtin_problem("rest_point_exit")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
