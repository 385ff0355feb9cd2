import pytest

_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one acceptance criterion: a PASS/FAIL line, then the assertions."""

    def record(number, title, passed, detail, elapsed, limit):
        ok = bool(passed) and elapsed < limit
        _CRITERIA.append((number, f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail} "
                                  f"| {elapsed:.1f}s (limit {limit}s)"))
        assert passed, detail
        assert elapsed < limit, f"took {elapsed:.1f}s, limit {limit}s"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for _, line in sorted(_CRITERIA):
        terminalreporter.write_line(line)
