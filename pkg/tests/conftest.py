import sys
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "float64: run with float64 as the torch default dtype")


def pytest_runtest_setup(item):
    # per-test default dtype so no module can leak its choice into another
    torch.set_default_dtype(torch.float64 if item.get_closest_marker("float64") else torch.float32)


def pytest_runtest_teardown(item):
    torch.set_default_dtype(torch.float32)


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance_log.RESULTS):
        terminalreporter.write_line(acceptance_log.RESULTS[number])
