import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from hif4ptq.synth import gen_toy_model  # noqa: E402


@pytest.fixture(scope="session")
def small_model():
    return gen_toy_model(blocks=2, width=16, boundary=4, seed=7)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion gate")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        number, title = marker.args
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        line = f"criterion {number:>2} {'PASS' if rep.passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        item.config.stash.setdefault(_LINES, []).append((number, line))


_LINES = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
