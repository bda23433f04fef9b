import pytest

_VERDICTS: list[tuple[int, bool, str]] = []


@pytest.fixture
def verdict(capsys):
    """``verdict(n, ok, detail)`` records and prints one acceptance line."""
    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append((n, ok, detail))
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(_VERDICTS):
        terminalreporter.write_line(f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
