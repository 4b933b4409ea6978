import numpy as np
import pytest
from hypothesis import settings

from organseg.volume import PhantomSpec, make_phantom

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_phantom():
    """A 32x32x8 phantom: (Volume, Mask)."""
    return make_phantom(PhantomSpec(seed=7, dims=(32, 32, 8), target_fraction=0.04))


# acceptance criteria record their verdicts here; printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {text}")
