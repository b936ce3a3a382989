import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from offripp.episode import EnvConfig, reset

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def cfg():
    return EnvConfig()


@pytest.fixture
def state(cfg):
    return reset(cfg, field_seed=11, graph_seed=5, budget=8.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_REPORT = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """report(n, title, ok, detail): record one acceptance line, then assert it."""
    lines = request.config.stash.setdefault(_REPORT, [])

    def _report(n, title, ok, detail=""):
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        lines.append((n, line))
        print(line)
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_REPORT, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
