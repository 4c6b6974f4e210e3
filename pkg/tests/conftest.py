import numpy as np
import pytest
import torch

torch.set_num_threads(1)

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``."""
    def record(n: int, ok: bool, detail: str):
        _CRITERIA[n] = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
