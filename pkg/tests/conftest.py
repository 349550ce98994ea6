import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training or sweep test")
    config.addinivalue_line("markers", "acceptance: exit-criteria suite")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA: list[str] = []


def record_criterion(line: str):
    _CRITERIA.append(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
