import functools

import numpy as np
import pytest

from h2kit.construct import ExponentialKernel, construct_h2
from h2kit.geometry import grid_points


@functools.lru_cache(maxsize=None)
def exp2d(n, p=8, m=64, eta=0.9):
    """Cached 2D exponential-kernel test matrix (correlation length 0.1)."""
    pts = grid_points(n, 2)
    kern = ExponentialKernel(0.1)
    return construct_h2(pts, kern, m=m, eta=eta, p=p), kern, pts


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
