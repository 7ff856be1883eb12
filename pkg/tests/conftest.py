import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" and outcome != "error":
                continue
            n = next((m.args[0] for m in getattr(rep, "criterion_markers", [])), None)
            if n is not None:
                lines.append((n, "PASS" if outcome == "passed" else "FAIL", rep.nodeid.split("::")[-1]))
    if lines:
        terminalreporter.section("acceptance criteria")
        for n, verdict, name in sorted(lines):
            terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {name}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    rep.criterion_markers = list(item.iter_markers("criterion"))
