"""Shared test plumbing: a reporter that prints one line per acceptance
criterion in the terminal summary, pass or fail."""

import pytest

_LINES: list[tuple[int, str]] = []


@pytest.fixture
def criterion_report():
    def report(number: int, name: str, ok: bool, detail: str = "") -> None:
        status = "PASS" if ok else "FAIL"
        suffix = f" ({detail})" if detail else ""
        _LINES.append((number, f"{status} criterion {number}: {name}{suffix}"))

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
