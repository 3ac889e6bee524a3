import pytest

ACCEPTANCE = []


@pytest.fixture
def record():
    """Record one acceptance line: ``record(criterion, passed, detail)``."""
    def _record(criterion, passed, detail=""):
        ACCEPTANCE.append((criterion, bool(passed), detail))
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE, key=lambda r: _key(r[0])):
        terminalreporter.write_line(f"criterion {criterion:<22} {'PASS' if passed else 'FAIL'}  {detail}")


def _key(name):
    head = name.split()[0]
    num = "".join(ch for ch in head if ch.isdigit())
    return int(num or 0), name
