import pytest

# one (status, number, title, detail) row per acceptance criterion, printed at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for status, number, title, detail in sorted(ACCEPTANCE, key=lambda r: r[1]):
        terminalreporter.write_line(f"{status} {number}. {title}: {detail}")


@pytest.fixture
def criterion():
    """``criterion(number, title, ok, detail)`` records the verdict and asserts it."""

    def record(number, title, ok, detail):
        ACCEPTANCE.append(("PASS" if ok else "FAIL", number, title, detail))
        print(f"{'PASS' if ok else 'FAIL'} {number}. {title}: {detail}")
        assert ok, detail

    return record
