import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from snnreg.tensor import core as tc

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def f64():
    """Run the test with float64 as the default storage precision."""
    with tc.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


ACCEPTANCE = pytest.StashKey[dict]()


class Criterion:
    """Context manager recording one acceptance line: PASS, FAIL or FINDING plus a detail string."""

    def __init__(self, table: dict, number: int, title: str):
        self.table, self.number, self.title = table, number, title
        self.detail = ""
        self.finding = False

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if kind is None:
            status = "FINDING" if self.finding else "PASS"
        else:
            status = "FAIL"
            if not self.detail:
                self.detail = str(exc).splitlines()[0] if str(exc) else kind.__name__
        self.table[self.number] = (status, self.title, self.detail)
        return False


@pytest.fixture
def criterion(request):
    table = request.config.stash.setdefault(ACCEPTANCE, {})
    return lambda number, title: Criterion(table, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(ACCEPTANCE, {})
    if not table:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(table):
        status, title, detail = table[n]
        terminalreporter.write_line(f"criterion {n:2d} {status:7s} {title}: {detail}")
