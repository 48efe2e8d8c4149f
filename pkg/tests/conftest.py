import pytest

_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def acceptance():
    """Record one verdict line per acceptance criterion; printed in the terminal summary."""

    def record(key: str, ok: bool, detail: str):
        _ACCEPTANCE[key] = f"{key} {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[key])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_ACCEPTANCE, key=lambda k: int(k[1:])):
            terminalreporter.write_line(_ACCEPTANCE[key])
