import numpy as np
import pytest

from bros.blockmat import BlockShape, BlockVar
from bros.randsrc import RngStream


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def random_blockvar(gen: np.random.Generator, shape: BlockShape) -> BlockVar:
    return BlockVar(gen.standard_normal((m, n)) for m, n in shape)


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


@pytest.fixture
def stream():
    return RngStream(2024)


@pytest.fixture
def three_layers():
    return BlockShape(((4, 3), (2, 5), (6, 1)))


# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
