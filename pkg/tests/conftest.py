import os

import pytest

_LINES: list[str] = []


class Acceptance:
    """Records one PASS/FAIL line per acceptance criterion."""

    def __init__(self, capsys):
        self._capsys = capsys

    def report(self, tag: str, ok: bool, detail: str) -> bool:
        quick = "QUICK " if os.environ.get("SPREADNET_ACCEPTANCE_QUICK") == "1" else ""
        line = f"[{tag}] {quick}{'PASS' if ok else 'FAIL'} {detail}"
        _LINES.append(line)
        with self._capsys.disabled():
            print(f"\n{line}")
        return ok


@pytest.fixture
def acceptance(capsys):
    return Acceptance(capsys)


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
