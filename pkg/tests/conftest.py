import pytest

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Records one PASS/FAIL line for an acceptance criterion.

    Usage: ``criterion(3, "gradients vs finite differences", ok, "max rel err 2e-9")``.
    The line is printed immediately and repeated in the terminal summary.
    """
    def record(number: int, title: str, ok: bool, detail: str = ""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
