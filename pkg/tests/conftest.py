import pytest

# (criterion number, title, passed, detail), filled by test_acceptance.py
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n} ({title}): {'PASS' if ok else 'FAIL'}  {detail}")
