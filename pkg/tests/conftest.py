import os

# Allow real multi-threaded kernel runs even on small machines; must precede numba import.
os.environ.setdefault("NUMBA_NUM_THREADS", "8")

import pytest  # noqa: E402

_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance_log():
    def record(criterion: str, ok: bool, detail: str = "") -> None:
        _ACCEPTANCE.append(f"[{'PASS' if ok else 'FAIL'}] {criterion}" + (f" -- {detail}" if detail else ""))
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
