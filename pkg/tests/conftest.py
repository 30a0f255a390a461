import os
import sys

import numpy as np
import pytest

from tle.data import synth_dataset

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_train():
    return synth_dataset(seed=0)


@pytest.fixture(scope="session")
def default_test():
    return synth_dataset(seed=0, split="test")


@pytest.fixture(scope="session")
def tiny_dataset():
    return synth_dataset(classes=3, videos_per_class=4, frames=9, shape=(2, 2, 4), difficulty=0.3, seed=5)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
