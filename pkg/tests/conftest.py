from collections import defaultdict

import pytest

# criterion number -> list of (ok, detail) from every check that feeds it
_RESULTS = defaultdict(list)


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one check and returns ``ok``."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _RESULTS[number].append((bool(ok), detail))
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        checks = _RESULTS[number]
        ok = all(passed for passed, _ in checks)
        details = "; ".join(detail for _, detail in checks)
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {details}")
