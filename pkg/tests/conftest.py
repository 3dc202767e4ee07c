import numpy as np
import pytest

from partscope import _kernels


BACKENDS = [False, True] if _kernels.HAVE_NUMBA else [False]


@pytest.fixture(params=BACKENDS, ids=lambda b: "numba" if b else "numpy")
def backend(request):
    """Run the test once per kernel backend, restoring the previous selection afterwards."""
    prev = _kernels.use_numba(request.param)
    yield request.param
    _kernels.use_numba(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES = []


@pytest.fixture
def accept():
    """Record one acceptance line and fail the test when the criterion is not met."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
