"""Collects ``criterion`` marked outcomes and prints one line per acceptance criterion."""
import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    entry = _RESULTS.setdefault(n, {"title": title, "passed": True, "detail": []})
    if rep.failed:
        entry["passed"] = False
    if rep.when == "call" or rep.failed:
        entry["detail"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        e = _RESULTS[n]
        detail = "; ".join(e["detail"])
        terminalreporter.write_line(f"criterion {n}: {'PASS' if e['passed'] else 'FAIL'}  {e['title']}"
                                    + (f"  [{detail}]" if detail else ""))
