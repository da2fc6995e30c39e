import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gedi.cclm import TabularCCLM  # noqa: E402
from gedi.synth import s1  # noqa: E402

# One line per acceptance criterion, filled in by test_acceptance.py.
ACCEPTANCE_RESULTS = {}


@pytest.fixture
def s1_model() -> TabularCCLM:
    return s1().to_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
