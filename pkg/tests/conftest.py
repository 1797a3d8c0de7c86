import os
from pathlib import Path

import pytest

CACHE = Path(os.environ.get("POREDESIGN_TEST_CACHE", Path(__file__).resolve().parent.parent / ".test-cache"))

_VERDICTS = []


@pytest.fixture(scope="session")
def cache_dir():
    CACHE.mkdir(parents=True, exist_ok=True)
    return CACHE


@pytest.fixture
def verdict():
    """Record and print one pass/fail line for an acceptance criterion."""

    def record(tag: str, ok: bool, detail: str) -> bool:
        line = f"{tag} {'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        _VERDICTS.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
