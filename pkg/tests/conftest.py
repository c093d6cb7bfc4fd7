import pytest

# acceptance outcomes, filled by tests/test_acceptance.py
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, line in ACCEPTANCE.items():
        terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for the criterion named by the test's ``name`` marker."""
    name = request.node.get_closest_marker("criterion").args[0]
    notes: list[str] = []
    yield notes
    failed = getattr(request.node, "rep_call", None)
    status = "FAIL" if failed is None or failed.failed else "PASS"
    line = f"[{status}] {name}" + (f"  ({'; '.join(notes)})" if notes else "")
    ACCEPTANCE[name] = line
    print("\n" + line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep
