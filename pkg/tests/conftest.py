import pytest

_RESULTS: dict[int, str] = {}


@pytest.fixture(scope="session")
def report():
    """Record the one-line outcome of an acceptance criterion."""

    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        _RESULTS[number] = f"criterion {number} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        print(_RESULTS[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_RESULTS):
            terminalreporter.write_line(_RESULTS[n])
