import pytest

_CRITERIA: dict[int, tuple[bool, str]] = {}
_TOTAL = 13


@pytest.fixture
def criterion():
    """Record the outcome of a numbered acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(ok), detail)
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, _TOTAL + 1):
        if n in _CRITERIA:
            ok, detail = _CRITERIA[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL  not evaluated")
