"""Shared test configuration: the acceptance scorecard.

Acceptance tests report one line each through the ``criterion``
fixture. The collected lines are printed as a terminal section at the
end of the run, so the scorecard stays visible even when every test
passes and captures swallow per-test stdout.
"""

import re

import pytest

_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Score one acceptance criterion.

    Usage: ``assert criterion(3, "generator calibration", ok, detail)``.
    Returns ``ok`` unchanged so the assert carries the verdict.
    """

    def score(number: int, title: str, ok: bool, detail: str = "") -> bool:
        status = "PASS" if ok else "FAIL"
        line = f"criterion {number:2d} [{status}] {title}"
        if detail:
            line += f" ({detail})"
        _LINES.append(line)
        return ok

    return score


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    # A criterion test that dies before scoring itself (setup error,
    # unexpected exception) must still leave a FAIL line behind.
    outcome = yield
    report = outcome.get_result()
    if report.when not in ("setup", "call") or not report.failed:
        return
    match = re.match(r"test_criterion_(\d+)", item.name)
    if match is None:
        return
    number = int(match.group(1))
    if any(line.startswith(f"criterion {number:2d} ") for line in _LINES):
        return
    _LINES.append(
        f"criterion {number:2d} [FAIL] {item.name} raised before scoring"
    )


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_LINES):
        terminalreporter.write_line(line)
