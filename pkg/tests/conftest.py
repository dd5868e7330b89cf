import time
from contextlib import contextmanager

import pytest

_CRITERIA: dict = {}


class CriterionLog:
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""

    @contextmanager
    def check(self, number: int, title: str, limit_s: float | None = None):
        start = time.perf_counter()
        try:
            yield
        except BaseException as exc:
            _CRITERIA[number] = (False, title, time.perf_counter() - start, f"{type(exc).__name__}: {exc}")
            raise
        elapsed = time.perf_counter() - start
        if limit_s is not None and elapsed > limit_s:
            _CRITERIA[number] = (False, title, elapsed, f"runtime {elapsed:.1f} s over the {limit_s:.0f} s limit")
            raise AssertionError(f"criterion {number} took {elapsed:.1f} s (limit {limit_s} s)")
        _CRITERIA[number] = (True, title, elapsed, "")


@pytest.fixture(scope="session")
def criterion():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, title, elapsed, why = _CRITERIA[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'} ({elapsed:6.1f} s) {title}"
        terminalreporter.write_line(line + (f"  [{why.splitlines()[0][:160]}]" if why else ""))
