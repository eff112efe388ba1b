"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""
import pytest

RESULTS: dict = {}
DETAILS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")
    config.addinivalue_line("markers", "slow: trains models; minutes rather than seconds")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        RESULTS[n] = (title, status, DETAILS.get(n, ""))


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        title, status, detail = RESULTS[n]
        line = f"criterion {n}: {status}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
