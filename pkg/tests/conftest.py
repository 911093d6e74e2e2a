"""Collects the one-line verdicts from the acceptance suite and prints them after the run."""

ACCEPTANCE_LINES: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[criterion])
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
