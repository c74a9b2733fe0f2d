import pytest

_LINES = []


class AcceptanceReport:
    def record(self, criterion: int, ok: bool, detail: str) -> None:
        line = f"criterion {criterion:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        _LINES.append(line)
        print(line)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceReport()


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
