import sys

import numpy as np
import pytest

from dslstm.experiments import synthetic_records
from dslstm.synth import SyntheticSpec


@pytest.fixture(scope="session")
def tiny_records():
    """Twelve short synthetic utterances, three per class."""
    recs, _ = synthetic_records(SyntheticSpec(per_class=3, duration=(0.6, 1.0), seed=11))
    return recs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
