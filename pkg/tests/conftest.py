import os
from pathlib import Path

import pytest

_VERDICTS: dict[str, str] = {}


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion; returns the outcome."""

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        _VERDICTS[name] = line
        print(line)
        return bool(ok)

    return record


@pytest.fixture(scope="session")
def run_cache(tmp_path_factory) -> Path:
    """Directory for trained runs; set MMDISTILL_CACHE to keep them between sessions."""
    d = os.environ.get("MMDISTILL_CACHE")
    if d:
        Path(d).mkdir(parents=True, exist_ok=True)
        return Path(d)
    return tmp_path_factory.mktemp("runs")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_VERDICTS, key=lambda n: int(n[1:])):
        terminalreporter.write_line(_VERDICTS[name])
