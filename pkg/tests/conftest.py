import numpy as np
import pytest

ACCEPTANCE_RESULTS = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def report(request):
    """Lets an acceptance test attach a one-line measurement to its verdict."""
    notes = []
    request.node.acceptance_notes = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = marker.args
    notes = "; ".join(getattr(item, "acceptance_notes", []))
    verdict = "PASS" if rep.passed else "FAIL"
    ACCEPTANCE_RESULTS[number] = f"[{verdict}] {number:>2}. {title}" + (f" ({notes})" if notes else "")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
