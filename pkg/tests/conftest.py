import pytest

_VERDICTS = []


class _Verdicts:
    def record(self, criterion, passed, detail):
        status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
        line = f"[{status}] {criterion}: {detail}"
        _VERDICTS.append(line)
        return line


@pytest.fixture
def verdict():
    return _Verdicts()


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
