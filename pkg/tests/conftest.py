import numpy as np
import pytest

from fanet.autograd import Tensor, precision


@pytest.fixture
def double():
    with precision("double"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(arr, dtype=np.float64):
    return Tensor(np.array(arr, dtype=dtype), requires_grad=True)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
