import os

import pytest
from hypothesis import settings

settings.register_profile("emnet", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("emnet")

# filled by test_acceptance; printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the long training criteria")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow") or os.environ.get("EMNET_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="long training run; enable with --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
