"""Prints a one-line verdict per acceptance criterion at the end of the run."""

_verdicts = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        label = props.get("criterion", report.nodeid.rsplit("::", 1)[-1])
        _verdicts[label] = ("PASS" if report.passed else "FAIL", props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_verdicts):
        verdict, detail = _verdicts[label]
        terminalreporter.write_line(f"{label}: {verdict}  {detail}".rstrip())
