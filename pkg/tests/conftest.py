import numpy as np
import pytest

from aesim import tensor as T

_criteria: list[tuple[str, str, str]] = []


@pytest.fixture(autouse=True)
def _float64():
    with T.precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = getattr(item, "criterion_detail", "")
        outcome = report.outcome.upper()
        # ungated criteria report their own verdict when the test itself passes
        if outcome == "PASSED" and hasattr(item, "criterion_verdict"):
            outcome = item.criterion_verdict
        _criteria.append((marker.args[0], outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in _criteria:
        label = {"PASSED": "PASS", "FAILED": "FAIL", "SKIPPED": "SKIP"}.get(outcome, outcome)
        terminalreporter.write_line(f"[{label}] {name}" + (f"  ({detail})" if detail else ""))
