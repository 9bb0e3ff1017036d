import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_lines(request):
    """Collects one PASS/FAIL line per acceptance criterion for the end-of-run summary."""
    return request.config.stash.setdefault(_LINES, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda text: int(text.split()[2])):
            terminalreporter.write_line(line)
