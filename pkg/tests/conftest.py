import numpy as np
import pytest
import torch

from neurogir import tensor_core as tc


@pytest.fixture(autouse=True)
def _reference_mode():
    tc.reference_mode(0)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
