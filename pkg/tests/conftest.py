import pytest

CRITERIA: dict[str, str] = {}


@pytest.fixture(scope="session")
def verdict_log():
    return CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=lambda k: (len(k), k)):
        terminalreporter.write_line(CRITERIA[key])
