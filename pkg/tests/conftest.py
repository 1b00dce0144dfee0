import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pointslice import kernels

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

BACKENDS = kernels.available_backends()


@pytest.fixture
def rng(request):
    # one stream per test so reordering tests never changes their data
    return np.random.default_rng(abs(hash(request.node.name)) % (2**32))


@pytest.fixture(params=BACKENDS)
def backend(request):
    with kernels.use_backend(request.param):
        yield request.param


_criteria: dict[str, str] = {}
_notes: dict[str, str] = {}


@pytest.fixture
def note(request):
    """Attach a short measurement to this criterion's summary line."""
    def add(text: str) -> None:
        _notes[request.node.name] = text
    return add


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or report.outcome != "passed":
        prev = _criteria.get(name)
        if prev != "FAIL":
            _criteria[name] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda n: int(n.split("_")[2])):
        extra = f"  ({_notes[name]})" if name in _notes else ""
        terminalreporter.write_line(f"{_criteria[name]}  {name}{extra}")
