import numpy as np
import pytest

from chainbridge.chain_model import preset
from chainbridge.htransform import bridge_h
from chainbridge.kernels import gaussian_kernel
from chainbridge.measures import GaussianMeasure


@pytest.fixture(scope="session")
def di():
    return preset("double_integrator")


@pytest.fixture(scope="session")
def di_target(di):
    """N((1,1), Gramian/4): the standard steering target for the double integrator."""
    return GaussianMeasure([1.0, 1.0], 0.25 * gaussian_kernel(di, 0.0, 1.0).Sigma)


@pytest.fixture(scope="session")
def di_h(di, di_target):
    return bridge_h(di, np.zeros(2), di_target)


_ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion; printed in the summary."""
    def report(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
