import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_qkv(rng, dims, scale=1.0):
    return tuple((scale * rng.standard_normal(dims)).astype(np.float32) for _ in range(3))


def as4(rows):
    """[L, D] nested list -> float32 [1, 1, L, D]."""
    return np.asarray(rows, dtype=np.float32)[None, None]


# One summary line per acceptance check, filled in by test_acceptance.py.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
