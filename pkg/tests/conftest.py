import numpy as np
import pytest
from hypothesis import settings

from rieszlab.riesz_kernel import RieszParams, make_kernel

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")

_TABLES = {}
ACCEPTANCE_LINES = []


def kernel(s=0.5, accuracy=1e-8, d=3):
    key = (d, s, accuracy)
    if key not in _TABLES:
        _TABLES[key] = make_kernel(RieszParams(d, s), accuracy)
    return _TABLES[key]


@pytest.fixture(scope="session")
def table():
    return kernel(0.5, 1e-8)


@pytest.fixture(scope="session")
def table_log():
    return kernel(0.0, 1e-8)


@pytest.fixture(scope="session")
def table6():
    return kernel(0.5, 1e-6)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def report():
    def emit(tag, ok, detail=""):
        line = f"{tag} {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
