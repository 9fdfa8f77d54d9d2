"""Test-session plumbing: a pass/fail line per acceptance criterion."""

ACCEPTANCE_NOTES: dict = {}

_acceptance_outcomes: list = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        _acceptance_outcomes.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance_outcomes:
        line = f"{outcome.upper():6s} {name}"
        note = ACCEPTANCE_NOTES.get(name)
        if note:
            line += f"  [{note}]"
        terminalreporter.write_line(line)
