import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.ndimage import gaussian_filter

from fdreg.volume import Volume

settings.register_profile("fdreg", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fdreg")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_random(rng, shape, sigma=1.0):
    return gaussian_filter(rng.random(shape), sigma)


@pytest.fixture
def pair12(rng):
    """A 12^3 pair with a smooth nonlinear relationship plus a bit of independent texture."""
    a = smooth_random(rng, (12, 12, 12))
    a = (a - a.min()) / (a.max() - a.min())
    b = np.sin(3.0 * a) + 0.1 * smooth_random(rng, (12, 12, 12))
    return Volume(a), Volume(b)


def smooth_velocity(rng, shape, vmax, sigma=2.0):
    v = np.stack([gaussian_filter(rng.standard_normal(shape), sigma) for _ in range(3)])
    return v * (vmax / np.abs(v).max())


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion.

    The lines are echoed immediately and repeated in the terminal summary.
    """
    def record(number, passed, detail):
        line = f"[criterion {number:2d}] {'PASS' if passed else 'FAIL'}: {detail}"
        print(line)
        request.config.acceptance_lines.append(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
