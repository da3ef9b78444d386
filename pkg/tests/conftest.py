"""Shared pytest hooks: one PASS/FAIL line per acceptance criterion in the terminal summary."""

import pytest

_CRITERIA: dict[int, tuple[str, str, float]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "failed"
    _CRITERIA[mark.args[0]] = ("PASS" if rep.passed else "FAIL", detail, rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail, secs = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  ({secs:.1f}s)  {detail}")
