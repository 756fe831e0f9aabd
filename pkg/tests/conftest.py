import pytest

_ACCEPTANCE: list[tuple[int, bool, str]] = []


class _Recorder:
    def __call__(self, criterion: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE.append((criterion, bool(ok), detail))
        return bool(ok)


@pytest.fixture(scope="session")
def acceptance():
    """Record one pass/fail line per acceptance criterion (printed in the terminal summary)."""
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
