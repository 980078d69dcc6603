import sys
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

GOLDEN = Path(__file__).parent / "golden"
SEEDS = (0, 1, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def golden_dir() -> Path:
    return GOLDEN


@pytest.fixture(scope="session")
def toy():
    from isacir import config

    return config.profile("toy")


@pytest.fixture(scope="session")
def run_cache():
    """Trained toy runs keyed by config, shared by every test in the session."""
    return {}


@pytest.fixture(scope="session")
def full_runs(toy, run_cache):
    """Full-loss asymmetric toy runs at the three reference seeds, with their wall time."""
    from isacir import pipeline

    start = time.perf_counter()
    runs = [pipeline.cached_run(toy.with_seed(s), run_cache) for s in SEEDS]
    return runs, time.perf_counter() - start


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(acceptance_log.LINES):
            terminalreporter.write_line(acceptance_log.LINES[number])
