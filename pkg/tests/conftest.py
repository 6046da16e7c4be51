import pytest

_RESULTS: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    entry = _RESULTS.setdefault(number, {"title": title, "passed": True, "seconds": 0.0, "detail": ""})
    if rep.when == "call":
        entry["seconds"] += call.stop - call.start
        entry["detail"] = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed:
        entry["passed"] = False
    if rep.passed and rep.when == "call" and hasattr(rep, "wasxfail"):
        entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        r = _RESULTS[n]
        status = "PASS" if r["passed"] else "FAIL"
        line = f"ACCEPTANCE {n} {status}: {r['title']} ({r['seconds']:.1f} s)"
        if r["detail"]:
            line += f" [{r['detail']}]"
        tr.write_line(line)


@pytest.fixture
def detail(record_property):
    """Attach a one-line measurement summary to the acceptance report."""
    def add(text):
        record_property("detail", text)
        print(text)
    return add
