import numpy as np
import pytest

from aseg.core.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def away_from_zero(rng, shape, margin=0.05):
    """Uniform values with |x| >= margin so kinks stay outside the difference stencil."""
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
