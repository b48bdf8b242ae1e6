import numpy as np
import pytest

from robinhum.grid import build_grid
from robinhum.noise import build_tree


@pytest.fixture
def grid16():
    return build_grid(16, (0.25, 0.5), (0.3, 0.45))


@pytest.fixture
def tree4():
    return build_tree(4, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}")
