from contextlib import contextmanager

import numpy as np
import pytest

from cmnet.tensor import Tensor

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def dtensor(arr, grad=False) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


@contextmanager
def criterion(number: int, title: str):
    """Record one PASS/FAIL line for an acceptance criterion.

    The body may store a short summary under ``info["detail"]``.
    """
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        reason = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        _CRITERIA[number] = f"FAIL  criterion {number}: {title}: {info['detail']} [{reason[:160]}]"
        raise
    _CRITERIA[number] = f"PASS  criterion {number}: {title}: {info['detail']}"


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
