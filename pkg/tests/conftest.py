import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from allocdesign.cohort import Cohort  # noqa: E402


def make_cohort(u, mu0=None, group=None, split=None):
    u = np.asarray(u, dtype=float)
    return Cohort([f"i{k}" for k in range(u.size)], u, mu0, group, split)


@pytest.fixture
def two_point():
    """n=2, u=(1, 0): the smallest design with a binding utility floor."""
    return make_cohort([1.0, 0.0])


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# Acceptance verdicts: each acceptance test stores one line in its user
# properties; a test that errors before doing so is reported as FAIL.
_VERDICTS = {}


@pytest.fixture(autouse=True)
def _acceptance_title(request):
    marker = request.node.get_closest_marker("acceptance")
    if marker is not None:
        request.node.user_properties.append(("acceptance_id", marker.args))
    yield


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "acceptance_id" not in props:
        return
    number, title = props["acceptance_id"]
    if "verdict" in props:
        _VERDICTS[number] = props["verdict"]
    elif report.when == "call" or (report.failed and number not in _VERDICTS):
        outcome = "PASS" if report.passed else "FAIL"
        _VERDICTS[number] = f"[{number:>2}] {outcome}  {title}: no verdict recorded ({report.outcome})"


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
