import numpy as np
import pytest

_CRITERIA = {}  # number -> [title, passed, notes]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def note(request):
    """Attach a measured value to the acceptance summary line of this test."""
    mark = request.node.get_closest_marker("criterion")

    def add(text):
        if mark is not None:
            _CRITERIA.setdefault(mark.args[0], [mark.args[1], True, []])[2].append(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    entry = _CRITERIA.setdefault(mark.args[0], [mark.args[1], True, []])
    if rep.failed or rep.skipped:
        entry[1] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, ok, notes = _CRITERIA[num]
        extra = f"  ({'; '.join(notes)})" if notes else ""
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {title}{extra}")
