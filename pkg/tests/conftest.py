"""Collects acceptance-criterion outcomes and prints one line per criterion."""

_RESULTS = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", m.args))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    num, title = props["criterion"]
    # a criterion may span several tests; it passes only if all of them do
    if report.when == "call" or not report.passed:
        prev = _RESULTS.get(num, (title, True))[1]
        _RESULTS[num] = (title, prev and report.passed and not report.skipped)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_RESULTS):
        title, ok = _RESULTS[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {title}")
