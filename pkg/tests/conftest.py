import pytest

_ACCEPTANCE = {}


@pytest.fixture
def acceptance_report():
    def record(n, res):
        _ACCEPTANCE[n] = res
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        res = _ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if res.passed else 'FAIL'} criterion {n}: {res.detail}")
