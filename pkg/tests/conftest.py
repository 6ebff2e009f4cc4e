import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from loopback import LoopbackServer  # noqa: E402

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test decides")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        details = [v for k, v in item.user_properties if k == "detail"]
        _CRITERIA[number] = {
            "title": title,
            "passed": report.passed,
            "seconds": report.duration,
            "detail": "; ".join(details),
        }


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        r = _CRITERIA[n]
        verdict = "PASS" if r["passed"] else "FAIL"
        line = f"criterion {n}: {verdict}  {r['title']}  ({r['seconds']:.2f} s)"
        if r["detail"]:
            line += f"  [{r['detail']}]"
        tr.write_line(line)


@pytest.fixture
def server_factory():
    """Start loopback servers on demand; all are shut down after the test."""
    started = []

    def make(files, **options):
        srv = LoopbackServer(files, **options).__enter__()
        started.append(srv)
        return srv

    yield make
    for srv in started:
        srv.close()
