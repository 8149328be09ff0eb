import pytest

N_CRITERIA = 11
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def record():
    """Store one criterion's verdict; tests call this before asserting."""
    def _record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(ok), detail)
        return bool(ok)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in range(1, N_CRITERIA + 1):
        if k in ACCEPTANCE:
            ok, detail = ACCEPTANCE[k]
            terminalreporter.write_line(f"ACCEPTANCE #{k} {'PASS' if ok else 'FAIL'}: {detail}")
        else:
            terminalreporter.write_line(f"ACCEPTANCE #{k} FAIL: not evaluated")
