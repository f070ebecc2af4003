import numpy as np
import pytest

from evdetect import _accel
from evdetect.data import SynthConfig, generate_synthetic


@pytest.fixture(params=[True, False], ids=["numba", "numpy"])
def both_paths(request):
    """Run the test once per kernel implementation."""
    before = _accel.enabled()
    _accel.set_enabled(request.param)
    yield request.param
    _accel.set_enabled(before)


@pytest.fixture(scope="session")
def short_record():
    return generate_synthetic(SynthConfig(duration_s=120.0, rng_seed=7), "short")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """Collect the acceptance verdict lines in one block at the end."""
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
